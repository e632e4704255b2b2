//! Linear alignment layer: `H_v = Z_v · Wᵀ + b`, mapping encoder tokens into
//! the language model's word-embedding space.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::encoder::FeatureSequence;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const WEIGHT: &str = "projector.W";
pub const BIAS: &str = "projector.b";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectorConfig {
    pub vision_dim: usize,
    pub lm_dim: usize,
    #[serde(default = "default_bias")]
    pub bias: bool,
}

fn default_bias() -> bool {
    true
}

/// Projector output in LM embedding space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedTokens {
    pub tokens: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectorWeights {
    config: ProjectorConfig,
    store: ParamStore,
}

impl ProjectorWeights {
    /// `W ~ N(0, 1/D_v)`, `b = 0`; trainable.
    pub fn init(seed: u64, config: ProjectorConfig) -> Result<Self> {
        if config.vision_dim == 0 || config.lm_dim == 0 {
            return Err(Error::Config("projector dims must be positive".into()));
        }
        let mut rng = rng::stream(seed, "projector");
        let std = 1.0 / (config.vision_dim as f32).sqrt();
        let mut store = ParamStore::new();
        store.insert(
            WEIGHT,
            Tensor::randn(&[config.lm_dim, config.vision_dim], std, &mut rng),
        );
        if config.bias {
            store.insert(BIAS, Tensor::zeros(&[config.lm_dim]));
        }
        store.set_requires_grad(true);
        Ok(Self { config, store })
    }

    /// Explicit weights; `bias = None` disables the bias term.
    pub fn from_parts(w: Tensor, bias: Option<Tensor>) -> Result<Self> {
        let (lm_dim, vision_dim) = w.dims2()?;
        let mut store = ParamStore::new();
        if let Some(b) = &bias {
            if b.shape() != [lm_dim] {
                return Err(Error::TensorShape {
                    name: BIAS.into(),
                    expected: vec![lm_dim],
                    found: b.shape().to_vec(),
                });
            }
        }
        let config = ProjectorConfig {
            vision_dim,
            lm_dim,
            bias: bias.is_some(),
        };
        store.insert(WEIGHT, w);
        if let Some(b) = bias {
            store.insert(BIAS, b);
        }
        store.set_requires_grad(true);
        Ok(Self { config, store })
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, config: ProjectorConfig) -> Result<Self> {
        let mut map = checkpoint::select(map, "projector.");
        let mut store = ParamStore::new();
        store.insert(
            WEIGHT,
            ParamStore::take_checked(&mut map, WEIGHT, &[config.lm_dim, config.vision_dim])?,
        );
        if config.bias {
            store.insert(BIAS, ParamStore::take_checked(&mut map, BIAS, &[config.lm_dim])?);
        }
        store.set_requires_grad(true);
        Ok(Self { config, store })
    }

    pub fn load(path: &Path, config: ProjectorConfig) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?, config)
    }

    pub fn config(&self) -> &ProjectorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes([&self.store])
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Records the projection on `tape`; `z` must be `[N × D_v]`.
    pub fn forward(&self, tape: &mut Tape, z: Var) -> Result<Var> {
        let width = tape.shape(z).get(1).copied().unwrap_or(0);
        if width != self.config.vision_dim {
            return Err(Error::ShapeMismatch {
                op: "project",
                lhs: tape.shape(z).to_vec(),
                rhs: vec![self.config.lm_dim, self.config.vision_dim],
            });
        }
        let w = self.store.bind(tape, WEIGHT)?;
        let b = if self.config.bias {
            Some(self.store.bind(tape, BIAS)?)
        } else {
            None
        };
        tape.linear(z, w, b)
    }

    pub fn project(&self, z: &FeatureSequence) -> Result<ProjectedTokens> {
        let mut tape = Tape::new();
        let zv = tape.leaf(&z.tokens);
        let h = self.forward(&mut tape, zv)?;
        Ok(ProjectedTokens {
            tokens: tape.to_tensor(h),
        })
    }
}
