use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::lora::{self, LoraAdapters, TARGETS};
use super::tokenizer::{IMG, VOCAB_SIZE};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::nn::{self, Block, LayerCache, LowRank, Norm};
use crate::projector::ProjectedTokens;
use crate::rng;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const PREFIX: &str = "lm";

// Initial scales of the frozen stand-in model. Small token/position tables
// with unit-gain projections let spliced image tokens steer the residual
// stream through attention.
const EMBED_STD: f32 = 0.02;
/// Wide enough that a frozen random head can still separate next-byte logits
/// once the prefix is tuned.
const HEAD_STD: f32 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context: usize,
    pub mlp_ratio: usize,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            layers: 4,
            heads: 4,
            context: 768,
            mlp_ratio: 4,
        }
    }
}

impl LmConfig {
    pub fn vocab(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "LM dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.context == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("LM context and mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, v) = (self.dim, VOCAB_SIZE);
        let mut out = vec![
            (format!("{PREFIX}.tok_emb"), vec![v, d]),
            (format!("{PREFIX}.pos_emb"), vec![self.context, d]),
            (format!("{PREFIX}.norm.gamma"), vec![d]),
            (format!("{PREFIX}.norm.beta"), vec![d]),
            (format!("{PREFIX}.head.weight"), vec![v, d]),
        ];
        for i in 0..self.layers {
            out.extend(nn::block_shapes(
                &format!("{PREFIX}.layers.{i}"),
                d,
                self.mlp_ratio,
                false,
            ));
        }
        out
    }
}

/// Keys/values of every layer for positions already processed.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KvCache {
    layers: Vec<LayerCache>,
    len: usize,
}

impl KvCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![LayerCache::default(); layers],
            len: 0,
        }
    }

    /// Positions cached so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Tiny pre-norm decoder-only transformer over the byte vocabulary.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniLm {
    config: LmConfig,
    store: ParamStore,
}

impl MiniLm {
    /// Seeded random weights. Every tensor starts frozen.
    pub fn init(seed: u64, config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "lm");
        let (d, v) = (config.dim, VOCAB_SIZE);
        let mut store = ParamStore::new();
        store.insert(format!("{PREFIX}.tok_emb"), Tensor::randn(&[v, d], EMBED_STD, &mut rng));
        store.insert(
            format!("{PREFIX}.pos_emb"),
            Tensor::randn(&[config.context, d], EMBED_STD, &mut rng),
        );
        for i in 0..config.layers {
            nn::init_block(
                &mut store,
                &format!("{PREFIX}.layers.{i}"),
                d,
                config.mlp_ratio,
                false,
                &mut rng,
            );
        }
        nn::init_norm(&mut store, &format!("{PREFIX}.norm"), d);
        store.insert(
            format!("{PREFIX}.head.weight"),
            Tensor::randn(&[v, d], HEAD_STD, &mut rng),
        );
        Ok(Self { config, store })
    }

    pub fn from_tensors(map: &BTreeMap<String, Tensor>, config: LmConfig) -> Result<Self> {
        config.validate()?;
        let mut map = checkpoint::select(map, &format!("{PREFIX}."));
        let mut store = ParamStore::new();
        for (name, shape) in config.shapes() {
            store.insert(name.clone(), ParamStore::take_checked(&mut map, &name, &shape)?);
        }
        Ok(Self { config, store })
    }

    pub fn load(path: &Path, config: LmConfig) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?, config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, [&self.store])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes([&self.store])
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn attn_weight(layer: usize, target: &str) -> String {
        format!("{PREFIX}.layers.{layer}.attn.{target}.weight")
    }

    /// Number of sequence positions `tokens` occupies once the `[IMG]`
    /// placeholder is replaced by `image_rows` rows.
    pub fn positions(tokens: &[u32], image_rows: usize) -> usize {
        let imgs = tokens.iter().filter(|&&t| t == IMG).count();
        tokens.len() - imgs + imgs * image_rows
    }

    /// Logits `[T × V]` for every position; `T` counts image rows.
    pub fn forward(
        &self,
        tokens: &[u32],
        image: Option<&ProjectedTokens>,
        adapters: Option<&LoraAdapters>,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let img = image.map(|h| tape.leaf(&h.tokens));
        let logits = self.forward_tape(&mut tape, tokens, img, adapters, None)?;
        Ok(tape.to_tensor(logits))
    }

    /// Records the forward pass on `tape`. With a `cache`, `tokens` continue
    /// the cached sequence and the cache is extended in place.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        image: Option<Var>,
        adapters: Option<&LoraAdapters>,
        mut cache: Option<&mut KvCache>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let n_img = tokens.iter().filter(|&&t| t == IMG).count();
        match (n_img, image) {
            (0, None) | (1, Some(_)) => {}
            (0, Some(_)) => {
                return Err(Error::ImageSplice(
                    "image tokens supplied without an [IMG] placeholder".into(),
                ))
            }
            (_, None) => {
                return Err(Error::ImageSplice(
                    "[IMG] placeholder present but no image tokens supplied".into(),
                ))
            }
            (n, Some(_)) => return Err(Error::ImageSplice(format!("{n} [IMG] placeholders, expected one"))),
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= VOCAB_SIZE) {
            return Err(Error::TokenOutOfRange(bad));
        }
        if let Some(img) = image {
            let w = tape.shape(img).get(1).copied().unwrap_or(0);
            if w != cfg.dim {
                return Err(Error::ShapeMismatch {
                    op: "image splice",
                    lhs: tape.shape(img).to_vec(),
                    rhs: vec![0, cfg.dim],
                });
            }
        }
        let image_rows = image.map_or(0, |v| tape.shape(v)[0]);
        let start = cache.as_ref().map_or(0, |c| c.len);
        let t_new = Self::positions(tokens, image_rows);
        if start + t_new > cfg.context {
            return Err(Error::ContextOverflow {
                needed: start + t_new,
                limit: cfg.context,
            });
        }
        if t_new == 0 {
            return Err(Error::Config("forward over an empty sequence".into()));
        }

        let tok_emb = self.store.bind(tape, &format!("{PREFIX}.tok_emb"))?;
        let pos_emb = self.store.bind(tape, &format!("{PREFIX}.pos_emb"))?;
        let mut parts = Vec::new();
        let mut run: Vec<usize> = Vec::new();
        for &t in tokens {
            if t == IMG {
                if !run.is_empty() {
                    parts.push(tape.embedding(tok_emb, &run)?);
                    run.clear();
                }
                if image_rows > 0 {
                    parts.push(image.expect("checked above"));
                }
            } else {
                run.push(t as usize);
            }
        }
        if !run.is_empty() {
            parts.push(tape.embedding(tok_emb, &run)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let pos = tape.slice_rows(pos_emb, start, t_new)?;
        let mut h = tape.add(x, pos)?;

        for i in 0..cfg.layers {
            let mut block = Block::bind(tape, &self.store, &format!("{PREFIX}.layers.{i}"))?;
            if let Some(ad) = adapters {
                let scale = ad.scale();
                for (t, lin) in TARGETS
                    .into_iter()
                    .zip([&mut block.q, &mut block.k, &mut block.v, &mut block.o])
                {
                    lin.lora = Some(LowRank {
                        a: ad.store().bind(tape, &lora::name(i, t, "a"))?,
                        b: ad.store().bind(tape, &lora::name(i, t, "b"))?,
                        scale,
                    });
                }
            }
            let layer_cache = cache.as_deref_mut().map(|c| &mut c.layers[i]);
            h = block.forward(tape, h, cfg.heads, Some(start), layer_cache)?;
        }
        if let Some(c) = cache {
            c.len += t_new;
        }
        let norm = Norm::bind(tape, &self.store, &format!("{PREFIX}.norm"))?;
        let h = norm.forward(tape, h)?;
        let head = self.store.bind(tape, &format!("{PREFIX}.head.weight"))?;
        tape.matmul_nt(h, head)
    }
}
