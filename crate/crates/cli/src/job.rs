//! Fully resolved jobs. A job carries every setting it needs, so the copy
//! stored in a run manifest is enough to repeat the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use spectra_core::data::instruct::BuildConfig;
use spectra_core::data::rgb::save_png;
use spectra_core::data::synth::{self, read_labels};
use spectra_core::data::{
    self, build_instruction_dataset, load_msi, read_jsonl, BandMapping, CaptionProvider, InstructionTemplates,
    RemoteCaptioner, Split, Stretch, StubCaptioner, SynthConfig,
};
use spectra_core::encoder::EncoderWeights;
use spectra_core::eval::{
    self, extract_features, label_coverage_score, pca2d, sweep_splits, FeatureMatrix, LabeledSample, Pooling,
    ProbeConfig, Provenance, ScoreRow,
};
use spectra_core::lm::tokenizer::prompt;
use spectra_core::lm::{LoraAdapters, MiniLm, Sampling, Task};
use spectra_core::projector::ProjectorWeights;
use spectra_core::train::{
    load_checkpoint, prepare_examples, train_alignment, train_finetune, ModelConfig, Stage, StageConfig, TrainReport,
    CHECKPOINT_FILE, REPORT_FILE,
};

use crate::manifest::TIMING_FILE;

pub const MODEL_FILE: &str = "model.json";
pub const FEATURES_FILE: &str = "features.csv";
pub const EMBEDDING_FILE: &str = "embedding.csv";
pub const PROBE_FILE: &str = "probe.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const DESCRIPTIONS_FILE: &str = "descriptions.jsonl";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Job {
    DatasetSynth(SynthJob),
    DatasetBuild(BuildJob),
    DatasetToRgb(RgbJob),
    Train(TrainJob),
    EmbedExport(EmbedJob),
    ProbeSweep(ProbeJob),
    Score(ScoreJob),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthJob {
    pub seed: u64,
    pub classes: usize,
    pub per_class: usize,
    pub synth: SynthConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Captioner {
    Stub,
    Remote {
        endpoint: String,
        timeout_ms: u64,
        attempts: u32,
        backoff_ms: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BuildJob {
    pub dataset: PathBuf,
    pub captioner: Captioner,
    pub build: BuildConfig,
    pub templates: InstructionTemplates,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RgbJob {
    /// An MSI file, or a directory searched recursively for `.msi` files.
    pub input: PathBuf,
    /// Band indices for R, G, B; `None` looks up Sentinel-2 B4/B3/B2 by id.
    pub bands: Option<[usize; 3]>,
    pub stretch: Stretch,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainJob {
    pub instructions: PathBuf,
    /// Starting checkpoint; required for finetuning.
    pub init: Option<PathBuf>,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: StageConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbedJob {
    pub checkpoint: PathBuf,
    pub model: ModelConfig,
    pub dataset: PathBuf,
    pub provenance: Provenance,
    pub pooling: Pooling,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeJob {
    pub features: Vec<PathBuf>,
    pub probe: ProbeConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ScoreJob {
    /// Score existing `{id, text, labels}` lines.
    Descriptions { path: PathBuf },
    /// Caption every matching sample with the checkpoint, then score.
    Generate {
        checkpoint: PathBuf,
        model: ModelConfig,
        instructions: PathBuf,
        split: Option<Split>,
        max_tokens: usize,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct Description {
    id: String,
    text: String,
    labels: Vec<String>,
}

impl Job {
    pub fn name(&self) -> &'static str {
        match self {
            Job::DatasetSynth(_) => "dataset synth",
            Job::DatasetBuild(_) => "dataset build",
            Job::DatasetToRgb(_) => "dataset to-rgb",
            Job::Train(t) => match t.train.stage {
                Stage::Align => "train align",
                Stage::Finetune => "train finetune",
            },
            Job::EmbedExport(_) => "embed export",
            Job::ProbeSweep(_) => "probe sweep",
            Job::Score(_) => "score",
        }
    }

    /// Writes every artifact into `out` and returns the stdout summary.
    pub fn execute(&self, out: &Path) -> Result<String> {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        match self {
            Job::DatasetSynth(j) => j.run(out),
            Job::DatasetBuild(j) => j.run(out),
            Job::DatasetToRgb(j) => j.run(out),
            Job::Train(j) => j.run(out),
            Job::EmbedExport(j) => j.run(out),
            Job::ProbeSweep(j) => j.run(out),
            Job::Score(j) => j.run(out),
        }
    }
}

/// Absolute form of an input path, so a stored job does not depend on the
/// working directory. Missing inputs are data errors naming the path.
pub fn input_path(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).map_err(|e| {
        anyhow::Error::new(spectra_core::Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", p.display()),
        )))
    })
}

/// Model architecture for a checkpoint: the `model.json` written next to it
/// when present, otherwise `fallback`.
pub fn model_for_checkpoint(checkpoint: &Path, fallback: ModelConfig) -> Result<ModelConfig> {
    let p = checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_FILE);
    if !p.exists() {
        return Ok(fallback);
    }
    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
    Ok(serde_json::from_str(&text).map_err(spectra_core::Error::from)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

impl SynthJob {
    fn run(&self, out: &Path) -> Result<String> {
        let ds = synth::generate(self.seed, self.classes, self.per_class, &self.synth)?;
        ds.validate()?;
        let manifest = ds.write(out)?;
        Ok(format!(
            "{} images, {} classes ({}), content hash {}",
            manifest.sample_count,
            ds.classes.len(),
            ds.classes.join(", "),
            manifest.content_hash
        ))
    }
}

impl BuildJob {
    fn run(&self, out: &Path) -> Result<String> {
        let entries = read_labels(&self.dataset.join(synth::LABELS_FILE))?;
        let provider: Box<dyn CaptionProvider> = match &self.captioner {
            Captioner::Stub => Box::new(StubCaptioner),
            Captioner::Remote {
                endpoint,
                timeout_ms,
                attempts,
                backoff_ms,
            } => Box::new(
                RemoteCaptioner::new(endpoint, Duration::from_millis(*timeout_ms))?
                    .with_retry(*attempts, Duration::from_millis(*backoff_ms)),
            ),
        };
        let built = build_instruction_dataset(
            &self.dataset,
            &entries,
            provider.as_ref(),
            &self.templates,
            &self.build,
            out,
        )?;
        let m = &built.manifest;
        let splits: Vec<String> = m.split_counts.iter().map(|(k, v)| format!("{k} {v}")).collect();
        Ok(format!(
            "{} samples ({}), {} skipped, content hash {}",
            m.sample_count,
            splits.join(", "),
            m.skipped,
            m.content_hash
        ))
    }
}

fn msi_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let p = entry?.path();
        if p.is_dir() {
            msi_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e == "msi") {
            out.push(p);
        }
    }
    Ok(())
}

impl RgbJob {
    fn run(&self, out: &Path) -> Result<String> {
        self.stretch.validate()?;
        let (root, mut files) = if self.input.is_dir() {
            let mut f = Vec::new();
            msi_files(&self.input, &mut f)?;
            (self.input.clone(), f)
        } else {
            (
                self.input.parent().unwrap_or(Path::new("")).to_path_buf(),
                vec![self.input.clone()],
            )
        };
        files.sort();
        if files.is_empty() {
            return Err(spectra_core::Error::Dataset(format!("no .msi files under {}", self.input.display())).into());
        }
        for f in &files {
            let img = load_msi(f)?;
            let mapping = match self.bands {
                Some([red, green, blue]) => BandMapping { red, green, blue },
                None => BandMapping::sentinel2(&img)?,
            };
            let rgb = data::to_rgb(&img, mapping, self.stretch)?;
            let rel = f.strip_prefix(&root).unwrap_or(f).with_extension("png");
            let dest = out.join(rel);
            if let Some(parent) = dest.parent() {
                std::fs::create_dir_all(parent)?;
            }
            save_png(&dest, &rgb)?;
        }
        Ok(format!("{} PNG composites", files.len()))
    }
}

impl TrainJob {
    fn run(&self, out: &Path) -> Result<String> {
        let model = &self.model;
        model.validate()?;
        let stage = self.train.stage;
        let (encoder, mut projector, lm, adapters) = match &self.init {
            Some(p) => {
                let ck = load_checkpoint(p, model)?;
                (ck.encoder, ck.projector, ck.lm, ck.adapters)
            }
            None if stage == Stage::Finetune => bail!(crate::config::usage(
                "finetuning needs --checkpoint from an alignment run"
            )),
            None => (
                EncoderWeights::init(self.seed, model.encoder)?,
                ProjectorWeights::init(self.seed, model.projector())?,
                MiniLm::init(self.seed, model.lm)?,
                None,
            ),
        };
        let samples = read_jsonl(&self.instructions)?;
        let jsonl_dir = self.instructions.parent().unwrap_or(Path::new("."));
        let examples = prepare_examples(&samples, jsonl_dir, &encoder, &model.lm, &self.train)?;
        log::info!("{}: {} examples", stage.name(), examples.len());

        let mut report = match stage {
            Stage::Align => train_alignment(&examples, &encoder, &mut projector, &lm, &self.train, Some(out))?,
            Stage::Finetune => {
                let mut adapters = match adapters {
                    Some(a) => a,
                    None => LoraAdapters::init(self.seed, model.lora, &model.lm)?,
                };
                train_finetune(
                    &examples,
                    &encoder,
                    &mut projector,
                    &lm,
                    &mut adapters,
                    &self.train,
                    Some(out),
                )?
            }
        };
        write_json(&out.join(MODEL_FILE), model)?;
        write_json(
            &out.join(TIMING_FILE),
            &serde_json::json!({ "wall_time_s": report.wall_time_s }),
        )?;
        report.wall_time_s = 0.0;
        report.checkpoint = Some(CHECKPOINT_FILE.to_string());
        write_report(&out.join(REPORT_FILE), &report)?;
        Ok(format!(
            "{}: {} steps, {} samples, loss {:.4} -> {:.4}, {} trainable parameters",
            stage.name(),
            report.steps,
            report.samples_seen,
            report.initial_loss().unwrap_or(f64::NAN),
            report.final_loss().unwrap_or(f64::NAN),
            report.trainable_params
        ))
    }
}

/// The report without its wall-clock field, which lives in `timing.json`.
fn write_report(path: &Path, report: &TrainReport) -> Result<()> {
    let mut v = serde_json::to_value(report)?;
    if let Some(obj) = v.as_object_mut() {
        obj.remove("wall_time_s");
    }
    write_json(path, &v)
}

impl EmbedJob {
    fn run(&self, out: &Path) -> Result<String> {
        let ck = load_checkpoint(&self.checkpoint, &self.model)?;
        let loaded = synth::load_dataset(&self.dataset)?;
        let samples: Vec<LabeledSample> = loaded
            .iter()
            .map(|(e, img)| {
                if e.labels.len() > 1 {
                    log::warn!("{}: probing uses the first of {} labels", e.id, e.labels.len());
                }
                LabeledSample {
                    id: &e.id,
                    label: e.labels.first().map_or("", String::as_str),
                    image: img,
                }
            })
            .collect();
        let projector = (self.provenance != Provenance::VisionOnly).then_some(&ck.projector);
        let features = extract_features(&samples, &ck.encoder, projector, self.provenance, self.pooling)?;
        features.write_csv(&out.join(FEATURES_FILE))?;
        let coords = pca2d(&features, self.seed)?;
        eval::write_embedding_csv(&out.join(EMBEDDING_FILE), &coords)?;
        Ok(format!(
            "{} features: {} rows x {} dims",
            self.provenance.name(),
            features.rows(),
            features.dim
        ))
    }
}

impl ProbeJob {
    fn run(&self, out: &Path) -> Result<String> {
        let mut results = Vec::new();
        for p in &self.features {
            let m = FeatureMatrix::read_csv(p)?;
            log::info!("probing {} ({} rows)", m.provenance.name(), m.rows());
            results.extend(sweep_splits(&m, &self.probe)?);
        }
        eval::write_sweep_csv(&out.join(PROBE_FILE), &results)?;
        let mut means: BTreeMap<(Provenance, u64), (f64, usize)> = BTreeMap::new();
        for r in &results {
            let e = means
                .entry((r.provenance, (r.ratio * 10.0).round() as u64))
                .or_default();
            e.0 += r.accuracy;
            e.1 += 1;
        }
        let mut s = String::from("provenance ratio mean_accuracy");
        for ((p, r), (sum, n)) in means {
            write!(s, "\n{} {:.1} {:.4}", p.name(), r as f64 / 10.0, sum / n as f64)?;
        }
        Ok(s)
    }
}

impl ScoreJob {
    fn run(&self, out: &Path) -> Result<String> {
        let descriptions = match self {
            ScoreJob::Descriptions { path } => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                text.lines()
                    .filter(|l| !l.trim().is_empty())
                    .map(|l| serde_json::from_str::<Description>(l).map_err(|e| spectra_core::Error::from(e).into()))
                    .collect::<Result<Vec<_>>>()?
            }
            ScoreJob::Generate {
                checkpoint,
                model,
                instructions,
                split,
                max_tokens,
            } => {
                let ck = load_checkpoint(checkpoint, model)?;
                let samples = read_jsonl(instructions)?;
                let dir = instructions.parent().unwrap_or(Path::new("."));
                let chosen: Vec<_> = samples
                    .iter()
                    .filter(|s| s.task == Task::Caption && split.is_none_or(|sp| s.split == sp))
                    .collect();
                let mut generated = Vec::with_capacity(chosen.len());
                for s in chosen {
                    let img = load_msi(&s.image_path(dir))?;
                    let h = ck.projector.project(&ck.encoder.encode(&img)?)?;
                    let g = ck.lm.generate(
                        &prompt(s.task, &s.instruction),
                        Some(&h),
                        ck.adapters.as_ref(),
                        *max_tokens,
                        Sampling::Greedy,
                    )?;
                    generated.push(Description {
                        id: s.id.clone(),
                        text: g.text,
                        labels: s.labels.clone(),
                    });
                }
                let mut text = String::new();
                for d in &generated {
                    text.push_str(&serde_json::to_string(d)?);
                    text.push('\n');
                }
                let p = out.join(DESCRIPTIONS_FILE);
                std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
                generated
            }
        };
        let rows: Vec<ScoreRow> = descriptions
            .iter()
            .map(|d| ScoreRow {
                id: d.id.clone(),
                score: label_coverage_score(&d.text, &d.labels),
            })
            .collect();
        eval::write_scores_csv(&out.join(SCORES_FILE), &rows)?;
        let mean = rows.iter().map(|r| r.score).sum::<f64>() / rows.len().max(1) as f64;
        Ok(format!("{} descriptions, mean label coverage {mean:.4}", rows.len()))
    }
}
