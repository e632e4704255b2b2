//! Low-rank adapters on the attention projections (Q, K, V, O) of every
//! layer: `W′ = W + (alpha/r) · B · A`, with `A: [r × d_in]`,
//! `B: [d_out × r]`, and `B = 0` at initialisation.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{LmConfig, MiniLm};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, ParamStore, Tensor};

pub const TARGETS: [&str; 4] = ["q", "k", "v", "o"];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `rank`, giving a scale of 1.
    pub alpha: Option<f32>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: None }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f32 {
        self.alpha.unwrap_or(self.rank as f32)
    }

    pub fn scale(&self) -> f32 {
        self.alpha() / self.rank as f32
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapters {
    config: LoraConfig,
    layers: usize,
    dim: usize,
    store: ParamStore,
}

pub fn name(layer: usize, target: &str, part: &str) -> String {
    format!("lora.layers.{layer}.{target}.{part}")
}

/// `W + scale · B·A`
pub fn lora_apply(w: &Tensor, a: &Tensor, b: &Tensor, scale: f32) -> Result<Tensor> {
    let (d_out, d_in) = w.dims2()?;
    let (r, a_in) = a.dims2()?;
    let (b_out, r2) = b.dims2()?;
    if a_in != d_in || b_out != d_out || r != r2 {
        return Err(Error::ShapeMismatch {
            op: "lora_apply",
            lhs: w.shape().to_vec(),
            rhs: vec![b_out, r2, r, a_in],
        });
    }
    let delta = kernels::matmul(b.data(), a.data(), d_out, r, d_in);
    let data = w.data().iter().zip(&delta).map(|(w, d)| w + scale * d).collect();
    Tensor::new(vec![d_out, d_in], data)
}

impl LoraAdapters {
    /// `A ~ N(0, 1/d_in)`, `B = 0`; all adapter tensors trainable.
    pub fn init(seed: u64, config: LoraConfig, lm: &LmConfig) -> Result<Self> {
        if config.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        let mut rng = rng::stream(seed, "lora");
        let d = lm.dim;
        let mut store = ParamStore::new();
        for l in 0..lm.layers {
            for t in TARGETS {
                store.insert(
                    name(l, t, "a"),
                    Tensor::randn(&[config.rank, d], 1.0 / (d as f32).sqrt(), &mut rng),
                );
                store.insert(name(l, t, "b"), Tensor::zeros(&[d, config.rank]));
            }
        }
        store.set_requires_grad(true);
        Ok(Self {
            config,
            layers: lm.layers,
            dim: d,
            store,
        })
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, config: LoraConfig, lm: &LmConfig) -> Result<Self> {
        let mut map = checkpoint::select(map, "lora.");
        let d = lm.dim;
        let mut store = ParamStore::new();
        for l in 0..lm.layers {
            for t in TARGETS {
                let a = name(l, t, "a");
                let b = name(l, t, "b");
                store.insert(a.clone(), ParamStore::take_checked(&mut map, &a, &[config.rank, d])?);
                store.insert(b.clone(), ParamStore::take_checked(&mut map, &b, &[d, config.rank])?);
            }
        }
        store.set_requires_grad(true);
        Ok(Self {
            config,
            layers: lm.layers,
            dim: d,
            store,
        })
    }

    pub fn load(path: &Path, config: LoraConfig, lm: &LmConfig) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?, config, lm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, [&self.store])
    }

    pub fn config(&self) -> &LoraConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn scale(&self) -> f32 {
        self.config.scale()
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// `layers · 4 · r · (d_in + d_out)`
    pub fn expected_params(config: &LoraConfig, lm: &LmConfig) -> usize {
        lm.layers * TARGETS.len() * config.rank * (lm.dim + lm.dim)
    }

    /// Effective weight for one target matrix.
    pub fn effective(&self, lm: &MiniLm, layer: usize, target: &str) -> Result<Tensor> {
        let w = lm.store().get(&MiniLm::attn_weight(layer, target))?;
        lora_apply(
            w,
            self.store.get(&name(layer, target, "a"))?,
            self.store.get(&name(layer, target, "b"))?,
            self.scale(),
        )
    }

    /// A plain model with every adapter baked into its base weight.
    pub fn merge(&self, lm: &MiniLm) -> Result<MiniLm> {
        if lm.config().layers != self.layers || lm.config().dim != self.dim {
            return Err(Error::Config(format!(
                "adapters for {} layers of width {} do not fit this model",
                self.layers, self.dim
            )));
        }
        let mut merged = lm.clone();
        for l in 0..self.layers {
            for t in TARGETS {
                let w = self.effective(lm, l, t)?;
                let slot = merged.store_mut().get_mut(&MiniLm::attn_weight(l, t))?;
                *slot = w.with_requires_grad(slot.requires_grad());
            }
        }
        Ok(merged)
    }
}
