//! Spectral transformer encoder over 3D spatial-spectral patches.
//!
//! An image of `B` bands is cut into `P×P` spatial patches and groups of `S`
//! consecutive bands; each `P×P×S` cube becomes one token. Tokens are
//! ordered spectral-group-major, then raster order over spatial patches.
//! Within a token the cube is flattened band → row → col.
//!
//! The encoder is used frozen: its weights are a seeded stand-in for
//! pretrained weights and are never updated by training.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::msi::{BandInfo, MultispectralImage};
use crate::error::{Error, Result};
use crate::nn::{self, Block, Linear, Norm};
use crate::rng;
use crate::tensor::{ParamStore, Tape, Tensor};

pub const PREFIX: &str = "encoder";
/// Unit-scale positional embeddings keep the tokens of a random frozen
/// encoder distinguishable from one another.
const POS_STD: f32 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpectralPatchConfig {
    pub image_size: usize,
    pub bands: usize,
    pub patch: usize,
    pub spectral_group: usize,
}

impl Default for SpectralPatchConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            bands: 12,
            patch: 16,
            spectral_group: 3,
        }
    }
}

impl SpectralPatchConfig {
    pub fn validate(&self) -> Result<()> {
        let Self {
            image_size,
            bands,
            patch,
            spectral_group,
        } = *self;
        if image_size == 0 || bands == 0 || patch == 0 || spectral_group == 0 {
            return Err(Error::Config("patch config fields must be positive".into()));
        }
        if image_size % patch != 0 {
            return Err(Error::Config(format!(
                "spatial patch {patch} does not divide image size {image_size}"
            )));
        }
        if bands % spectral_group != 0 {
            return Err(Error::Config(format!(
                "spectral group {spectral_group} does not divide band count {bands}"
            )));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn groups(&self) -> usize {
        self.bands / self.spectral_group
    }

    /// `N = (H/P)² · (B/S)`
    pub fn num_tokens(&self) -> usize {
        self.patches_per_side().pow(2) * self.groups()
    }

    /// `P·P·S`
    pub fn token_dim(&self) -> usize {
        self.patch * self.patch * self.spectral_group
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub patch: SpectralPatchConfig,
    pub dim: usize,
    pub heads: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            patch: SpectralPatchConfig::default(),
            dim: 64,
            heads: 4,
            depth: 4,
            mlp_ratio: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        if self.dim == 0 || self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    fn shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (n, din, d) = (self.patch.num_tokens(), self.patch.token_dim(), self.dim);
        let mut out = vec![
            (format!("{PREFIX}.patch_proj.weight"), vec![d, din]),
            (format!("{PREFIX}.patch_proj.bias"), vec![d]),
            (format!("{PREFIX}.pos"), vec![n, d]),
            (format!("{PREFIX}.norm.gamma"), vec![d]),
            (format!("{PREFIX}.norm.beta"), vec![d]),
        ];
        for i in 0..self.depth {
            out.extend(nn::block_shapes(
                &format!("{PREFIX}.blocks.{i}"),
                d,
                self.mlp_ratio,
                true,
            ));
        }
        out
    }
}

/// Encoder output `Z_v`: one row per spatial-spectral token.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    pub tokens: Tensor,
}

impl FeatureSequence {
    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderWeights {
    config: EncoderConfig,
    store: ParamStore,
    frozen: bool,
}

fn check_image(img: &MultispectralImage, cfg: &SpectralPatchConfig) -> Result<()> {
    if img.height() != cfg.image_size || img.width() != cfg.image_size || img.n_bands() != cfg.bands {
        return Err(Error::ImageShape {
            expected: format!("{0}x{0}x{1}", cfg.image_size, cfg.bands),
            found: format!("{}x{}x{}", img.height(), img.width(), img.n_bands()),
        });
    }
    Ok(())
}

/// Raw patch matrix `[N × P·P·S]`.
pub fn patchify(img: &MultispectralImage, cfg: &SpectralPatchConfig) -> Result<Tensor> {
    cfg.validate()?;
    check_image(img, cfg)?;
    let (p, s, side) = (cfg.patch, cfg.spectral_group, cfg.patches_per_side());
    let mut out = Vec::with_capacity(cfg.num_tokens() * cfg.token_dim());
    for g in 0..cfg.groups() {
        for py in 0..side {
            for px in 0..side {
                for b in g * s..(g + 1) * s {
                    for r in 0..p {
                        let row = py * p + r;
                        let start = (b * cfg.image_size + row) * cfg.image_size + px * p;
                        out.extend_from_slice(&img.data()[start..start + p]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![cfg.num_tokens(), cfg.token_dim()], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, cfg: &SpectralPatchConfig, bands: Vec<BandInfo>) -> Result<MultispectralImage> {
    cfg.validate()?;
    if patches.shape() != [cfg.num_tokens(), cfg.token_dim()] {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: vec![cfg.num_tokens(), cfg.token_dim()],
        });
    }
    let (p, s, side, size) = (cfg.patch, cfg.spectral_group, cfg.patches_per_side(), cfg.image_size);
    let mut data = vec![0.0f32; size * size * cfg.bands];
    let mut src = patches.data().chunks(p);
    for g in 0..cfg.groups() {
        for py in 0..side {
            for px in 0..side {
                for b in g * s..(g + 1) * s {
                    for r in 0..p {
                        let start = (b * size + py * p + r) * size + px * p;
                        data[start..start + p].copy_from_slice(src.next().expect("sized above"));
                    }
                }
            }
        }
    }
    MultispectralImage::new(size, size, bands, data)
}

impl EncoderWeights {
    /// Seeded random weights, frozen.
    pub fn init(seed: u64, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed, "encoder");
        let (n, din, d) = (config.patch.num_tokens(), config.patch.token_dim(), config.dim);
        let mut store = ParamStore::new();
        nn::init_linear(
            &mut store,
            &format!("{PREFIX}.patch_proj"),
            din,
            d,
            1.0 / (din as f32).sqrt(),
            true,
            &mut rng,
        );
        store.insert(format!("{PREFIX}.pos"), Tensor::randn(&[n, d], POS_STD, &mut rng));
        for i in 0..config.depth {
            nn::init_block(
                &mut store,
                &format!("{PREFIX}.blocks.{i}"),
                d,
                config.mlp_ratio,
                true,
                &mut rng,
            );
        }
        nn::init_norm(&mut store, &format!("{PREFIX}.norm"), d);
        Ok(Self {
            config,
            store,
            frozen: true,
        })
    }

    /// Build from checkpoint entries, validating every expected tensor.
    pub fn from_tensors(map: &BTreeMap<String, Tensor>, config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut map = checkpoint::select(map, &format!("{PREFIX}."));
        let mut store = ParamStore::new();
        for (name, shape) in config.shapes() {
            store.insert(name.clone(), ParamStore::take_checked(&mut map, &name, &shape)?);
        }
        Ok(Self {
            config,
            store,
            frozen: true,
        })
    }

    pub fn load(path: &Path, config: EncoderConfig) -> Result<Self> {
        Self::from_tensors(&checkpoint::load(path)?, config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, [&self.store])
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
        self.store.set_requires_grad(!frozen);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        checkpoint::to_bytes([&self.store])
    }

    /// `Z_v = norm(blocks(patch_proj(patchify(x)) + pos))`
    pub fn encode(&self, img: &MultispectralImage) -> Result<FeatureSequence> {
        if !self.frozen {
            return Err(Error::EncoderNotFrozen);
        }
        let cfg = &self.config;
        let patches = patchify(img, &cfg.patch)?;
        let mut tape = Tape::new();
        let x = tape.leaf(&patches);
        let proj = Linear::bind(&mut tape, &self.store, &format!("{PREFIX}.patch_proj"))?;
        let pos = self.store.bind(&mut tape, &format!("{PREFIX}.pos"))?;
        let mut h = proj.forward(&mut tape, x)?;
        h = tape.add(h, pos)?;
        for i in 0..cfg.depth {
            let block = Block::bind(&mut tape, &self.store, &format!("{PREFIX}.blocks.{i}"))?;
            h = block.forward(&mut tape, h, cfg.heads, None, None)?;
        }
        let norm = Norm::bind(&mut tape, &self.store, &format!("{PREFIX}.norm"))?;
        let z = norm.forward(&mut tape, h)?;
        Ok(FeatureSequence {
            tokens: tape.to_tensor(z),
        })
    }

    /// Encodes every image; output order follows input order.
    pub fn encode_batch(&self, imgs: &[MultispectralImage]) -> Result<Vec<FeatureSequence>> {
        imgs.par_iter().map(|img| self.encode(img)).collect()
    }
}
