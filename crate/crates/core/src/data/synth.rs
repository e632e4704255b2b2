//! Synthetic multispectral corpus.
//!
//! Every class owns a spectral signature `s_c ∈ R^B`. A pixel is
//!
//! ```text
//! x[b, r, c] = s_class[b] + a · g[b] · p(r, c) + σ · ε
//! ```
//!
//! where `p` is a zero-mean sum of integer-frequency sinusoids drawn per image
//! and `g` is a band loading shared by all classes. The spatial pattern is
//! therefore a confounder carrying no class information; only the spectrum
//! separates classes.

use std::collections::BTreeMap;
use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::DatasetManifest;
use super::msi::{load_msi, save_msi, MultispectralImage};
use crate::error::{Error, Result};
use crate::rng;

pub const LABELS_FILE: &str = "labels.csv";
pub const IMAGE_DIR: &str = "images";

const CLASS_NAMES: [&str; 10] = [
    "forest",
    "sea",
    "farmland",
    "urban",
    "lake",
    "desert",
    "snow",
    "wetland",
    "grassland",
    "river",
];
const MAX_DRAWS: usize = 20_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub image_size: usize,
    pub bands: usize,
    /// Gaussian noise standard deviation.
    pub sigma: f32,
    /// Minimum pairwise L2 distance between class signatures.
    pub margin: f32,
    pub pattern_amplitude: f32,
    /// Signatures are drawn uniformly from `[lo, hi]` per band.
    pub reflectance: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            image_size: 128,
            bands: 12,
            sigma: 0.05,
            margin: 0.3,
            pattern_amplitude: 0.1,
            reflectance: (0.05, 0.6),
        }
    }
}

/// One row of `labels.csv`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub id: String,
    /// Relative to the dataset directory.
    pub image: String,
    pub labels: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct LabelRow {
    id: String,
    image: String,
    labels: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub id: String,
    pub class: usize,
    pub image: MultispectralImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub classes: Vec<String>,
    pub signatures: Vec<Vec<f32>>,
    pub samples: Vec<SynthSample>,
}

pub fn class_names(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match CLASS_NAMES.get(i) {
            Some(s) => s.to_string(),
            None => format!("class{i}"),
        })
        .collect()
}

fn dist(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f32>().sqrt()
}

/// Rejection-samples `n` signatures with pairwise distance ≥ `margin`.
pub fn signatures(seed: u64, n: usize, cfg: &SynthConfig) -> Result<Vec<Vec<f32>>> {
    let mut r = rng::stream(seed, "signatures");
    let (lo, hi) = cfg.reflectance;
    let mut out: Vec<Vec<f32>> = Vec::with_capacity(n);
    let mut draws = 0;
    while out.len() < n {
        if draws == MAX_DRAWS {
            return Err(Error::SignatureMargin {
                classes: n,
                bands: cfg.bands,
                margin: cfg.margin,
            });
        }
        draws += 1;
        let cand: Vec<f32> = (0..cfg.bands).map(|_| r.random_range(lo..=hi)).collect();
        if out.iter().all(|s| dist(s, &cand) >= cfg.margin) {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Zero-mean spatial pattern: integer frequencies make every component sum
/// to zero over the full grid.
fn pattern(r: &mut rng::Rng, h: usize, w: usize) -> Vec<f64> {
    let mut p = vec![0.0; h * w];
    let fx_max = (w - 1).min(3);
    let fy_max = (h - 1).min(3);
    if fx_max == 0 && fy_max == 0 {
        return p;
    }
    for _ in 0..2 {
        let (fx, fy) = loop {
            let f = (r.random_range(0..=fx_max), r.random_range(0..=fy_max));
            if f != (0, 0) {
                break f;
            }
        };
        let phase = r.random_range(0.0..TAU);
        let amp = r.random_range(0.5..1.0);
        for row in 0..h {
            for col in 0..w {
                let t = TAU * (fx as f64 * col as f64 / w as f64 + fy as f64 * row as f64 / h as f64) + phase;
                p[row * w + col] += amp * t.sin();
            }
        }
    }
    p
}

pub fn generate(seed: u64, n_classes: usize, per_class: usize, cfg: &SynthConfig) -> Result<SynthDataset> {
    if n_classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {n_classes}")));
    }
    if cfg.image_size == 0 || cfg.bands == 0 || per_class == 0 {
        return Err(Error::Config(
            "image size, bands and per-class count must be positive".into(),
        ));
    }
    if !(cfg.sigma >= 0.0 && cfg.sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma must be finite and ≥ 0, got {}",
            cfg.sigma
        )));
    }
    let sigs = signatures(seed, n_classes, cfg)?;
    let mut lr = rng::stream(seed, "loading");
    let loading: Vec<f64> = (0..cfg.bands).map(|_| lr.random_range(0.5..1.5)).collect();
    let (h, w) = (cfg.image_size, cfg.image_size);
    let total = n_classes * per_class;
    let samples = (0..total)
        .into_par_iter()
        .map(|i| {
            let class = i % n_classes;
            let mut r = rng::stream(seed, &format!("image/{i}"));
            let p = pattern(&mut r, h, w);
            let a = cfg.pattern_amplitude as f64;
            let noise = rng::normal_vec(&mut r, h * w * cfg.bands, 1.0);
            let mut data = Vec::with_capacity(h * w * cfg.bands);
            for b in 0..cfg.bands {
                let s = sigs[class][b] as f64;
                for k in 0..h * w {
                    let v = s + a * loading[b] * p[k] + cfg.sigma as f64 * noise[b * h * w + k] as f64;
                    data.push(v as f32);
                }
            }
            Ok(SynthSample {
                id: format!("img_{i:05}"),
                class,
                image: MultispectralImage::from_planes(h, w, cfg.bands, data)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        classes: class_names(n_classes),
        signatures: sigs,
        samples,
    })
}

/// Training accuracy of a least-squares one-vs-rest classifier on band-mean
/// features (with intercept).
pub fn least_squares_accuracy(features: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<f64> {
    let n = features.len();
    if n == 0 || n != labels.len() {
        return Err(Error::Dataset("feature/label count mismatch".into()));
    }
    let d = features[0].len() + 1;
    let x = DMatrix::from_fn(n, d, |i, j| if j + 1 == d { 1.0 } else { features[i][j] });
    let y = DMatrix::from_fn(n, n_classes, |i, c| if labels[i] == c { 1.0 } else { 0.0 });
    let w = x
        .clone()
        .svd(true, true)
        .solve(&y, 1e-12)
        .map_err(|e| Error::Dataset(format!("least squares failed: {e}")))?;
    let pred = x * w;
    let correct = (0..n)
        .filter(|&i| {
            let row = pred.row(i);
            let best = (0..n_classes).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0);
            best == labels[i]
        })
        .count();
    Ok(correct as f64 / n as f64)
}

impl SynthDataset {
    pub fn band_means(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.image.band_means()).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.class).collect()
    }

    /// Generation-time sanity check: band means must be linearly separable.
    pub fn validate(&self) -> Result<()> {
        let acc = least_squares_accuracy(&self.band_means(), &self.labels(), self.classes.len())?;
        if acc < 1.0 {
            return Err(Error::Dataset(format!(
                "band means are not linearly separable (least-squares train accuracy {acc:.3}); lower sigma or raise the margin"
            )));
        }
        Ok(())
    }

    /// Writes `images/*.msi`, `labels.csv` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let img_dir = dir.join(IMAGE_DIR);
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::file(&img_dir, e))?;
        let entries: Vec<LabeledImage> = self
            .samples
            .iter()
            .map(|s| LabeledImage {
                id: s.id.clone(),
                image: format!("{IMAGE_DIR}/{}.msi", s.id),
                labels: vec![self.classes[s.class].clone()],
            })
            .collect();
        self.samples
            .par_iter()
            .zip(&entries)
            .try_for_each(|(s, e)| save_msi(&dir.join(&e.image), &s.image))?;
        write_labels(&dir.join(LABELS_FILE), &entries)?;
        let mut files: Vec<String> = entries.iter().map(|e| e.image.clone()).collect();
        files.push(LABELS_FILE.into());
        let m = DatasetManifest::new(
            "synthetic",
            dir,
            self.classes.clone(),
            BTreeMap::from([("all".to_string(), self.samples.len())]),
            0,
            files,
        )?;
        m.write(dir)?;
        Ok(m)
    }
}

pub fn write_labels(path: &Path, entries: &[LabeledImage]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    for e in entries {
        w.serialize(LabelRow {
            id: e.id.clone(),
            image: e.image.clone(),
            labels: e.labels.join(";"),
        })?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}

/// Reads `labels.csv`; multiple labels are `;`-separated.
pub fn read_labels(path: &Path) -> Result<Vec<LabeledImage>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: LabelRow = row?;
        let labels: Vec<String> = row
            .labels
            .split(';')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        out.push(LabeledImage {
            id: row.id,
            image: row.image,
            labels,
        });
    }
    Ok(out)
}

/// Loads every image listed in `labels.csv` under `dir`, in file order.
pub fn load_dataset(dir: &Path) -> Result<Vec<(LabeledImage, MultispectralImage)>> {
    let entries = read_labels(&dir.join(LABELS_FILE))?;
    entries
        .into_par_iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.image);
            let img = load_msi(&path)?;
            Ok((e, img))
        })
        .collect()
}
