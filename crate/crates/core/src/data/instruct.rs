//! Instruction-dataset builder: one caption and one classification sample
//! per image, written as JSONL with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::caption::{CaptionMetadata, CaptionProvider, CaptionRequest};
use super::manifest::DatasetManifest;
use super::msi::{load_msi, MultispectralImage};
use super::rgb::{encode_png, to_rgb, BandMapping, Stretch};
use super::synth::LabeledImage;
use crate::error::{Error, Result};
use crate::lm::Task;
use crate::rng;

pub const JSONL_FILE: &str = "instructions.jsonl";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionSample {
    pub id: String,
    /// Relative paths resolve against the JSONL file's directory.
    pub image: String,
    pub task: Task,
    pub instruction: String,
    pub response: String,
    pub labels: Vec<String>,
    pub split: Split,
}

impl InstructionSample {
    pub fn validate(&self) -> Result<()> {
        if self.response.is_empty() {
            return Err(Error::Dataset(format!("sample {} has an empty response", self.id)));
        }
        if self.task == Task::Classification && self.labels.is_empty() {
            return Err(Error::Dataset(format!(
                "classification sample {} has no labels",
                self.id
            )));
        }
        Ok(())
    }

    pub fn image_path(&self, jsonl_dir: &Path) -> PathBuf {
        jsonl_dir.join(&self.image)
    }
}

/// Sorted, comma-joined labels.
pub fn classification_response(labels: &[String]) -> String {
    let mut l = labels.to_vec();
    l.sort();
    l.dedup();
    l.join(", ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionTemplates {
    pub caption: Vec<String>,
    pub classification: Vec<String>,
}

impl Default for InstructionTemplates {
    fn default() -> Self {
        let v = |s: &[&str]| s.iter().map(|x| x.to_string()).collect();
        Self {
            caption: v(&[
                "Describe this image.",
                "Write a short description of the scene.",
                "What does this satellite image show?",
            ]),
            classification: v(&[
                "Which land-cover classes are present?",
                "List the classes in this image.",
                "Classify this scene.",
            ]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    pub seed: u64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub stretch: Stretch,
}

impl Default for BuildConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            train_fraction: 0.8,
            val_fraction: 0.1,
            stretch: Stretch::default(),
        }
    }
}

pub struct BuildOutput {
    pub samples: Vec<InstructionSample>,
    pub manifest: DatasetManifest,
}

/// Seeded per-image split assignment, shared by both samples of an image.
pub fn assign_splits(n: usize, cfg: &BuildConfig) -> Result<Vec<Split>> {
    let (tr, va) = (cfg.train_fraction, cfg.val_fraction);
    if !(0.0..=1.0).contains(&tr) || !(0.0..=1.0).contains(&va) || tr + va > 1.0 + 1e-12 {
        return Err(Error::Config(format!(
            "split fractions train={tr} val={va} are invalid"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, "split"));
    let n_train = (tr * n as f64).round() as usize;
    let n_val = ((va * n as f64).round() as usize).min(n - n_train.min(n));
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    Ok(out)
}

fn rgb_png(img: &MultispectralImage, stretch: Stretch) -> Result<Vec<u8>> {
    let mapping = BandMapping::sentinel2(img).or_else(|_| {
        if img.n_bands() >= 3 {
            Ok(BandMapping {
                red: 2,
                green: 1,
                blue: 0,
            })
        } else {
            Err(Error::BandMapping(format!(
                "{} bands cannot form an RGB composite",
                img.n_bands()
            )))
        }
    })?;
    encode_png(&to_rgb(img, mapping, stretch)?)
}

/// Path of `target` as seen from `from`: relative when it lies beneath it,
/// absolute otherwise.
fn reference_path(from: &Path, target: &Path) -> Result<String> {
    let from = from.canonicalize().map_err(|e| Error::file(from, e))?;
    let target = target.canonicalize().map_err(|e| Error::file(target, e))?;
    let p = target.strip_prefix(&from).map(Path::to_path_buf).unwrap_or(target);
    Ok(p.to_string_lossy().replace('\\', "/"))
}

/// Builds samples for `entries` (paths relative to `dataset_dir`) and writes
/// `instructions.jsonl` plus `manifest.json` into `out_dir`. A failed caption
/// drops that one sample and is counted in the manifest.
pub fn build_instruction_dataset(
    dataset_dir: &Path,
    entries: &[LabeledImage],
    provider: &dyn CaptionProvider,
    templates: &InstructionTemplates,
    cfg: &BuildConfig,
    out_dir: &Path,
) -> Result<BuildOutput> {
    if templates.caption.is_empty() || templates.classification.is_empty() {
        return Err(Error::Config("instruction templates must not be empty".into()));
    }
    if let Some(e) = entries.iter().find(|e| e.labels.is_empty()) {
        return Err(Error::Dataset(format!("image {} has no labels", e.id)));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::file(out_dir, e))?;
    let splits = assign_splits(entries.len(), cfg)?;

    let per_image: Vec<(Vec<InstructionSample>, usize, String)> = entries
        .par_iter()
        .zip(&splits)
        .map(|(e, &split)| -> Result<_> {
            let path = dataset_dir.join(&e.image);
            let img = load_msi(&path)?;
            let image = reference_path(out_dir, &path)?;
            let mut r = rng::stream(cfg.seed, &format!("template/{}", e.id));
            let cap_instr = &templates.caption[r.random_range(0..templates.caption.len())];
            let cls_instr = &templates.classification[r.random_range(0..templates.classification.len())];
            let meta = CaptionMetadata {
                id: e.id.clone(),
                labels: e.labels.clone(),
                height: img.height(),
                width: img.width(),
                bands: img.bands().to_vec(),
            };
            let png = if provider.needs_image() {
                Some(rgb_png(&img, cfg.stretch)?)
            } else {
                None
            };
            let sample = |task: Task, instruction: &str, response: String| InstructionSample {
                id: format!(
                    "{}-{}",
                    e.id,
                    if task == Task::Caption {
                        "caption"
                    } else {
                        "classification"
                    }
                ),
                image: image.clone(),
                task,
                instruction: instruction.to_string(),
                response,
                labels: e.labels.clone(),
                split,
            };
            let mut out = Vec::with_capacity(2);
            let mut skipped = 0;
            match provider.caption(&CaptionRequest {
                metadata: &meta,
                png: png.as_deref(),
            }) {
                Ok(text) if !text.trim().is_empty() => out.push(sample(Task::Caption, cap_instr, text)),
                Ok(_) => {
                    log::warn!("skipping caption for {}: empty caption", e.id);
                    skipped += 1;
                }
                Err(err) => {
                    log::warn!("skipping caption for {}: {err}", e.id);
                    skipped += 1;
                }
            }
            out.push(sample(
                Task::Classification,
                cls_instr,
                classification_response(&e.labels),
            ));
            Ok((out, skipped, image))
        })
        .collect::<Result<_>>()?;

    let mut samples = Vec::with_capacity(entries.len() * 2);
    let mut skipped = 0;
    let mut files = Vec::with_capacity(entries.len() + 1);
    for (s, k, image) in per_image {
        samples.extend(s);
        skipped += k;
        files.push(image);
    }
    samples.sort_by(|a, b| a.id.cmp(&b.id));
    write_jsonl(&out_dir.join(JSONL_FILE), &samples)?;
    files.push(JSONL_FILE.into());

    let mut classes: Vec<String> = entries.iter().flat_map(|e| e.labels.iter().cloned()).collect();
    classes.sort();
    classes.dedup();
    let mut split_counts = BTreeMap::new();
    for s in &samples {
        *split_counts.entry(s.split.name().to_string()).or_insert(0) += 1;
    }
    let manifest = DatasetManifest::new("instructions", out_dir, classes, split_counts, skipped, files)?;
    manifest.write(out_dir)?;
    Ok(BuildOutput { samples, manifest })
}

pub fn write_jsonl(path: &Path, samples: &[InstructionSample]) -> Result<()> {
    let mut text = String::new();
    for s in samples {
        text.push_str(&serde_json::to_string(s)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::file(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<InstructionSample>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let s: InstructionSample = serde_json::from_str(l)
                .map_err(|e| Error::Dataset(format!("{} line {}: {e}", path.display(), i + 1)))?;
            s.validate()?;
            Ok(s)
        })
        .collect()
}
