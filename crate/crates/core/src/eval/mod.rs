//! Probing-based evaluation: pooled features from the frozen encoder
//! (vision-only) or after the projector (language-grounded), linear probes
//! over a sweep of train ratios, a PCA export, and a label-coverage scorer.

mod pca;
mod probe;
mod score;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use pca::{pca2d, write_embedding_csv, EmbeddingRow};
pub use probe::{
    fold_blocks, linear_probe, read_sweep_csv, sweep_splits, train_split, write_sweep_csv, ProbeConfig, ProbeResult,
    RATIOS,
};
pub use score::{label_coverage_score, write_scores_csv, ScoreRow};

use crate::data::MultispectralImage;
use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::projector::ProjectorWeights;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    VisionOnly,
    LanguageGroundedClasslabel,
    LanguageGroundedScenedesc,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::VisionOnly => "vision_only",
            Provenance::LanguageGroundedClasslabel => "language_grounded_classlabel",
            Provenance::LanguageGroundedScenedesc => "language_grounded_scenedesc",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Provenance::VisionOnly,
            Provenance::LanguageGroundedClasslabel,
            Provenance::LanguageGroundedScenedesc,
        ]
        .into_iter()
        .find(|p| p.name() == s)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// One pooled feature row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub provenance: Provenance,
    pub ids: Vec<String>,
    pub labels: Vec<String>,
    pub dim: usize,
    /// Row-major `[rows × dim]`.
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        provenance: Provenance,
        ids: Vec<String>,
        labels: Vec<String>,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if ids.len() != labels.len() || data.len() != ids.len() * dim {
            return Err(Error::Eval(format!(
                "{} ids, {} labels and {} values do not form a {}-wide matrix",
                ids.len(),
                labels.len(),
                data.len(),
                dim
            )));
        }
        Ok(Self {
            provenance,
            ids,
            labels,
            dim,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    /// Sorted class vocabulary and each row's class index.
    pub fn class_indices(&self) -> (Vec<String>, Vec<usize>) {
        let mut classes = self.labels.clone();
        classes.sort();
        classes.dedup();
        let idx = self
            .labels
            .iter()
            .map(|l| classes.binary_search(l).expect("label in vocabulary"))
            .collect();
        (classes, idx)
    }

    /// `provenance,id,label,f0,…` with a header row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_file_error(path, e))?;
        let mut header = vec!["provenance".to_string(), "id".into(), "label".into()];
        header.extend((0..self.dim).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for i in 0..self.rows() {
            let mut rec = vec![
                self.provenance.name().to_string(),
                self.ids[i].clone(),
                self.labels[i].clone(),
            ];
            rec.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::file(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_file_error(path, e))?;
        let dim = r.headers()?.len().saturating_sub(3);
        let mut provenance = None;
        let (mut ids, mut labels, mut data) = (Vec::new(), Vec::new(), Vec::new());
        for rec in r.records() {
            let rec = rec?;
            let p = Provenance::parse(&rec[0])
                .ok_or_else(|| Error::Eval(format!("{}: unknown provenance `{}`", path.display(), &rec[0])))?;
            if *provenance.get_or_insert(p) != p {
                return Err(Error::Eval(format!("{}: mixed provenances", path.display())));
            }
            ids.push(rec[1].to_string());
            labels.push(rec[2].to_string());
            for v in rec.iter().skip(3) {
                data.push(
                    v.parse::<f32>()
                        .map_err(|e| Error::Eval(format!("{}: bad value `{v}`: {e}", path.display())))?,
                );
            }
        }
        let provenance = provenance.ok_or_else(|| Error::Eval(format!("{}: no feature rows", path.display())))?;
        Self::new(provenance, ids, labels, dim, data)
    }
}

pub(crate) fn csv_file_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::file(path, io),
        other => Error::Eval(format!("{}: {other:?}", path.display())),
    }
}

/// Column-wise mean (or max) over token rows.
pub fn pool(tokens: &Tensor, pooling: Pooling) -> Result<Vec<f32>> {
    let (n, d) = tokens.dims2()?;
    if n == 0 {
        return Err(Error::Eval("cannot pool zero tokens".into()));
    }
    let mut out = vec![0.0f64; d];
    match pooling {
        Pooling::Mean => {
            for r in 0..n {
                for (o, &v) in out.iter_mut().zip(tokens.row(r)) {
                    *o += v as f64;
                }
            }
            out.iter_mut().for_each(|o| *o /= n as f64);
        }
        Pooling::Max => {
            out.iter_mut().for_each(|o| *o = f64::NEG_INFINITY);
            for r in 0..n {
                for (o, &v) in out.iter_mut().zip(tokens.row(r)) {
                    *o = o.max(v as f64);
                }
            }
        }
    }
    Ok(out.into_iter().map(|v| v as f32).collect())
}

/// A labelled image to featurise.
pub struct LabeledSample<'a> {
    pub id: &'a str,
    pub label: &'a str,
    pub image: &'a MultispectralImage,
}

/// Vision-only features pool `Z_v`; with a projector, language-grounded
/// features pool `H_v`. Rows follow input order.
pub fn extract_features(
    samples: &[LabeledSample<'_>],
    encoder: &EncoderWeights,
    projector: Option<&ProjectorWeights>,
    provenance: Provenance,
    pooling: Pooling,
) -> Result<FeatureMatrix> {
    if projector.is_none() != (provenance == Provenance::VisionOnly) {
        return Err(Error::Eval(format!(
            "provenance {} does not match {} projector",
            provenance.name(),
            if projector.is_some() { "a" } else { "no" }
        )));
    }
    let rows: Vec<Vec<f32>> = samples
        .par_iter()
        .map(|s| {
            let z = encoder.encode(s.image)?;
            match projector {
                Some(p) => pool(&p.project(&z)?.tokens, pooling),
                None => pool(&z.tokens, pooling),
            }
        })
        .collect::<Result<_>>()?;
    let dim = rows.first().map_or(0, Vec::len);
    FeatureMatrix::new(
        provenance,
        samples.iter().map(|s| s.id.to_string()).collect(),
        samples.iter().map(|s| s.label.to_string()).collect(),
        dim,
        rows.concat(),
    )
}
