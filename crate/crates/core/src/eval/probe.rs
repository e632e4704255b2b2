use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{csv_file_error, FeatureMatrix, Provenance};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{kernels, AdamConfig, AdamState, Tensor};

/// Training fractions of the split sweep.
pub const RATIOS: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub folds: usize,
    pub lr: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
    /// z-score every feature with training-fold statistics.
    pub standardize: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            folds: 5,
            lr: 1e-4,
            batch: 100,
            epochs: 100,
            seed: 0,
            standardize: true,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.batch == 0 || self.epochs == 0 {
            return Err(Error::Config(
                "probe needs ≥ 2 folds, a positive batch and ≥ 1 epoch".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "probe learning rate must be positive, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub provenance: Provenance,
    pub ratio: f64,
    pub fold: usize,
    pub accuracy: f64,
}

/// Stratified k-fold blocks: each class is shuffled and dealt round-robin
/// over the folds (the dealer carries on across classes), so every block
/// holds ⌊m/k⌋ or ⌈m/k⌉ members of a class of size m. Inside a block the
/// classes are interleaved evenly.
pub fn fold_blocks(classes: &[usize], n_classes: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut rng = rng::stream(seed, "probe/order");
    let mut blocks: Vec<Vec<usize>> = vec![Vec::new(); folds];
    let mut dealt = 0;
    for c in 0..n_classes {
        let mut members: Vec<usize> = (0..classes.len()).filter(|&i| classes[i] == c).collect();
        members.shuffle(&mut rng);
        for i in members {
            blocks[dealt % folds].push(i);
            dealt += 1;
        }
    }
    for block in &mut blocks {
        let mut seen = vec![0usize; n_classes];
        let mut total = vec![0usize; n_classes];
        block.iter().for_each(|&i| total[classes[i]] += 1);
        let mut keyed: Vec<(f64, usize, usize)> = block
            .iter()
            .map(|&i| {
                let c = classes[i];
                seen[c] += 1;
                ((seen[c] as f64 - 0.5) / total[c] as f64, c, i)
            })
            .collect();
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        *block = keyed.into_iter().map(|(_, _, i)| i).collect();
    }
    blocks
}

/// Train/test indices for one fold: the blocks are laid end to end and the
/// training set is the cyclic window of `round(ratio · n)` samples starting
/// at block `fold`; everything else is held out. At ratio `(k-1)/k`, with k
/// dividing n, this is ordinary stratified k-fold.
pub fn train_split(
    classes: &[usize],
    n_classes: usize,
    ratio: f64,
    folds: usize,
    fold: usize,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Eval(format!("train ratio must lie in (0, 1), got {ratio}")));
    }
    let blocks = fold_blocks(classes, n_classes, folds, seed);
    let start: usize = blocks[..fold].iter().map(Vec::len).sum();
    let order = blocks.concat();
    let n = order.len();
    let n_train = (ratio * n as f64).round() as usize;
    if n_train == 0 || n_train >= n {
        return Err(Error::Eval(format!(
            "ratio {ratio} leaves an empty split of {n} samples"
        )));
    }
    let mut train: Vec<usize> = (0..n_train).map(|j| order[(start + j) % n]).collect();
    let mut test: Vec<usize> = (n_train..n).map(|j| order[(start + j) % n]).collect();
    train.sort_unstable();
    test.sort_unstable();
    let mut present = vec![false; n_classes];
    train.iter().for_each(|&i| present[classes[i]] = true);
    if let Some(class) = present.iter().position(|&p| !p) {
        return Err(Error::ClassAbsent { class });
    }
    Ok((train, test))
}

/// Softmax regression trained with Adam on `train`, scored by argmax
/// accuracy on `test`.
fn fit_and_score(
    x: &FeatureMatrix,
    classes: &[usize],
    n_classes: usize,
    train: &[usize],
    test: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<f64> {
    let d = x.dim;
    let (mean, scale) = if cfg.standardize {
        column_stats(x, train)
    } else {
        (vec![0.0; d], vec![1.0; d])
    };
    let feature = |i: usize| -> Vec<f32> {
        x.row(i)
            .iter()
            .zip(mean.iter().zip(&scale))
            .map(|(&v, (&m, &s))| ((v as f64 - m) / s) as f32)
            .collect()
    };
    let train_x: Vec<Vec<f32>> = train.iter().map(|&i| feature(i)).collect();

    let mut w = Tensor::zeros(&[n_classes, d]).with_requires_grad(true);
    let mut b = Tensor::zeros(&[n_classes]).with_requires_grad(true);
    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut rng = rng::stream(seed, "probe/batches");
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logits = vec![0.0f32; n_classes];
    let mut probs = vec![0.0f32; n_classes];
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch) {
            let mut gw = vec![0.0f32; n_classes * d];
            let mut gb = vec![0.0f32; n_classes];
            let inv = 1.0 / chunk.len() as f32;
            for &j in chunk {
                let xi = &train_x[j];
                logits_into(&w, &b, xi, &mut logits);
                kernels::softmax_into(&logits, &mut probs);
                probs[classes[train[j]]] -= 1.0;
                for (c, &p) in probs.iter().enumerate() {
                    let g = p * inv;
                    gb[c] += g;
                    gw[c * d..(c + 1) * d]
                        .iter_mut()
                        .zip(xi)
                        .for_each(|(a, &v)| *a += g * v);
                }
            }
            w.zero_grad();
            b.zero_grad();
            w.accumulate_grad(&gw)?;
            b.accumulate_grad(&gb)?;
            adam.step([("w", &mut w), ("b", &mut b)])?;
        }
    }

    let correct = test
        .iter()
        .filter(|&&i| {
            logits_into(&w, &b, &feature(i), &mut logits);
            argmax(&logits) == classes[i]
        })
        .count();
    Ok(correct as f64 / test.len() as f64)
}

fn logits_into(w: &Tensor, b: &Tensor, x: &[f32], out: &mut [f32]) {
    let d = x.len();
    for (c, o) in out.iter_mut().enumerate() {
        *o = b.data()[c] + kernels::dot(&w.data()[c * d..(c + 1) * d], x);
    }
}

/// First maximum wins ties.
fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold(
            (0, f32::NEG_INFINITY),
            |best, (i, &x)| if x > best.1 { (i, x) } else { best },
        )
        .0
}

fn column_stats(x: &FeatureMatrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let d = x.dim;
    let n = rows.len() as f64;
    let mut mean = vec![0.0f64; d];
    for &i in rows {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, &v)| *m += v as f64);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0f64; d];
    for &i in rows {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            *s += (v as f64 - m).powi(2);
        }
    }
    // Constant columns pass through centred but unscaled.
    let scale = var
        .into_iter()
        .map(|s| {
            let sd = (s / n).sqrt();
            if sd > 1e-12 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    (mean, scale)
}

/// One probe per fold at a single train ratio.
pub fn linear_probe(features: &FeatureMatrix, ratio: f64, cfg: &ProbeConfig) -> Result<Vec<ProbeResult>> {
    cfg.validate()?;
    let (names, classes) = features.class_indices();
    if names.len() < 2 {
        return Err(Error::Eval(format!("a probe needs ≥ 2 classes, found {}", names.len())));
    }
    let splits: Vec<(Vec<usize>, Vec<usize>)> = (0..cfg.folds)
        .map(|k| train_split(&classes, names.len(), ratio, cfg.folds, k, cfg.seed))
        .collect::<Result<_>>()?;
    splits
        .par_iter()
        .enumerate()
        .map(|(fold, (train, test))| {
            let seed = cfg.seed ^ ((fold as u64) << 32) ^ (ratio * 1000.0).round() as u64;
            Ok(ProbeResult {
                provenance: features.provenance,
                ratio,
                fold,
                accuracy: fit_and_score(features, &classes, names.len(), train, test, cfg, seed)?,
            })
        })
        .collect()
}

/// Probe every train ratio in [`RATIOS`].
pub fn sweep_splits(features: &FeatureMatrix, cfg: &ProbeConfig) -> Result<Vec<ProbeResult>> {
    let mut out = Vec::with_capacity(RATIOS.len() * cfg.folds);
    for ratio in RATIOS {
        out.extend(linear_probe(features, ratio, cfg)?);
    }
    Ok(out)
}

/// `provenance,ratio,fold,accuracy`. Accuracies are written with the
/// shortest representation that parses back to the same `f64`.
pub fn write_sweep_csv(path: &Path, results: &[ProbeResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::file(path, e))?);
    let mut body = String::from("provenance,ratio,fold,accuracy\n");
    for r in results {
        body.push_str(&format!(
            "{},{:.1},{},{}\n",
            r.provenance.name(),
            r.ratio,
            r.fold,
            r.accuracy
        ));
    }
    f.write_all(body.as_bytes()).map_err(|e| Error::file(path, e))?;
    f.flush().map_err(|e| Error::file(path, e))
}

pub fn read_sweep_csv(path: &Path) -> Result<Vec<ProbeResult>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_file_error(path, e))?;
    let bad = |what: &str| Error::Eval(format!("{}: bad {what}", path.display()));
    r.records()
        .map(|rec| {
            let rec = rec?;
            Ok(ProbeResult {
                provenance: Provenance::parse(&rec[0]).ok_or_else(|| bad("provenance"))?,
                ratio: rec[1].parse().map_err(|_| bad("ratio"))?,
                fold: rec[2].parse().map_err(|_| bad("fold"))?,
                accuracy: rec[3].parse().map_err(|_| bad("accuracy"))?,
            })
        })
        .collect()
}
