use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;

use super::sequence::{make_training_sequence, TrainingSequence};
use super::{ModelConfig, Stage, StageConfig, TrainReport, CHECKPOINT_FILE};
use crate::checkpoint;
use crate::data::{load_msi, InstructionSample};
use crate::encoder::{EncoderWeights, FeatureSequence};
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LoraAdapters, MiniLm, Task};
use crate::projector::ProjectorWeights;
use crate::rng;
use crate::tensor::{AdamConfig, AdamState, ParamStore, Tape, Tensor};

/// A sample ready for the trainer: frozen-encoder features are computed once
/// up front and shared between the samples of one image.
#[derive(Clone, Debug)]
pub struct TrainExample {
    pub id: String,
    pub task: Task,
    pub sequence: TrainingSequence,
    pub features: Arc<FeatureSequence>,
}

impl TrainExample {
    pub fn new(sample: &InstructionSample, features: Arc<FeatureSequence>, context: usize) -> Result<Self> {
        Ok(Self {
            id: sample.id.clone(),
            task: sample.task,
            sequence: make_training_sequence(sample, features.num_tokens(), context)?,
            features,
        })
    }
}

/// Filters `samples` by the stage's split and tasks, loads and encodes every
/// referenced image once, and tokenises.
pub fn prepare_examples(
    samples: &[InstructionSample],
    jsonl_dir: &Path,
    encoder: &EncoderWeights,
    lm: &LmConfig,
    cfg: &StageConfig,
) -> Result<Vec<TrainExample>> {
    let chosen: Vec<&InstructionSample> = samples
        .iter()
        .filter(|s| cfg.split.is_none_or(|sp| s.split == sp) && cfg.tasks.contains(&s.task))
        .collect();
    if chosen.is_empty() {
        return Err(Error::Dataset("no samples match the selected split and tasks".into()));
    }
    let patch = &encoder.config().patch;
    if patch.image_size != cfg.image_size {
        return Err(Error::Config(format!(
            "stage image size {} differs from encoder image size {}",
            cfg.image_size, patch.image_size
        )));
    }
    let mut paths: Vec<PathBuf> = chosen.iter().map(|s| s.image_path(jsonl_dir)).collect();
    paths.sort();
    paths.dedup();
    let images = paths
        .iter()
        .map(|p| {
            let img = load_msi(p)?;
            if img.height() != cfg.image_size || img.width() != cfg.image_size || img.n_bands() != patch.bands {
                return Err(Error::ImageShape {
                    expected: format!("{0}x{0}x{1}", cfg.image_size, patch.bands),
                    found: format!("{}x{}x{} ({})", img.height(), img.width(), img.n_bands(), p.display()),
                });
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    let feats: Vec<Arc<FeatureSequence>> = encoder.encode_batch(&images)?.into_iter().map(Arc::new).collect();
    let index: BTreeMap<&PathBuf, usize> = paths.iter().enumerate().map(|(i, p)| (p, i)).collect();
    chosen
        .iter()
        .map(|s| {
            let f = Arc::clone(&feats[index[&s.image_path(jsonl_dir)]]);
            TrainExample::new(s, f, lm.context)
        })
        .collect()
}

/// Everything a checkpoint file holds.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderWeights,
    pub projector: ProjectorWeights,
    pub lm: MiniLm,
    pub adapters: Option<LoraAdapters>,
}

pub fn save_checkpoint(
    path: &Path,
    encoder: &EncoderWeights,
    projector: &ProjectorWeights,
    lm: &MiniLm,
    adapters: Option<&LoraAdapters>,
) -> Result<()> {
    let mut stores: Vec<&ParamStore> = vec![encoder.store(), projector.store(), lm.store()];
    if let Some(a) = adapters {
        stores.push(a.store());
    }
    checkpoint::save(path, stores)
}

/// Adapters are loaded when the file carries any `lora.` tensors.
pub fn load_checkpoint(path: &Path, model: &ModelConfig) -> Result<Checkpoint> {
    let map = checkpoint::load(path)?;
    let adapters = if map.keys().any(|k| k.starts_with("lora.")) {
        Some(LoraAdapters::from_tensors(&map, model.lora, &model.lm)?)
    } else {
        None
    };
    Ok(Checkpoint {
        encoder: EncoderWeights::from_tensors(&map, model.encoder)?,
        projector: ProjectorWeights::from_tensors(&map, model.projector())?,
        lm: MiniLm::from_tensors(&map, model.lm)?,
        adapters,
    })
}

fn trainable_prefixes(stage: Stage) -> &'static [&'static str] {
    match stage {
        Stage::Align => &["projector."],
        Stage::Finetune => &["projector.", "lora."],
    }
}

/// Gradient of `(1/batch_len) · Σ loss_s` over one micro-batch, accumulated
/// into the trainable tensors' grad buffers. Returns per-sample losses.
fn micro_step(
    stage: Stage,
    batch: &[&TrainExample],
    batch_len: usize,
    projector: &mut ProjectorWeights,
    lm: &MiniLm,
    mut adapters: Option<&mut LoraAdapters>,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let mut total = None;
    let mut losses = Vec::with_capacity(batch.len());
    for ex in batch {
        let z = tape.leaf(&ex.features.tokens);
        let h = projector.forward(&mut tape, z)?;
        let logits = lm.forward_tape(&mut tape, &ex.sequence.tokens, Some(h), adapters.as_deref(), None)?;
        let (targets, mask) = ex.sequence.shifted();
        let ce = tape.cross_entropy(logits, &targets, &mask)?;
        let l = tape.value(ce)[0];
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss(ex.id.clone()));
        }
        losses.push(l as f64);
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let Some(total) = total else { return Ok(losses) };
    let loss = tape.scale(total, 1.0 / batch_len as f32);
    let grads = tape.backward(loss)?;
    let allowed = trainable_prefixes(stage);
    for (name, g) in grads.named() {
        if !allowed.iter().any(|p| name.starts_with(p)) {
            return Err(Error::FrozenViolation(format!(
                "`{name}` received a gradient during the {} stage",
                stage.name()
            )));
        }
        let slot = if name.starts_with("lora.") {
            match adapters.as_deref_mut() {
                Some(a) => a.store_mut().get_mut(name)?,
                None => return Err(Error::FrozenViolation(format!("`{name}` is not attached"))),
            }
        } else {
            projector.store_mut().get_mut(name)?
        };
        slot.accumulate_grad(g)?;
    }
    Ok(losses)
}

/// Accumulated gradients for one optimizer batch split into micro-batches of
/// `micro_batch`; leaves the weights untouched. Grad buffers are reset first.
pub fn accumulate_gradients(
    stage: Stage,
    batch: &[&TrainExample],
    micro_batch: usize,
    projector: &mut ProjectorWeights,
    lm: &MiniLm,
    mut adapters: Option<&mut LoraAdapters>,
) -> Result<BTreeMap<String, Vec<f32>>> {
    projector.store_mut().zero_grad();
    if let Some(a) = adapters.as_deref_mut() {
        a.store_mut().zero_grad();
    }
    for chunk in batch.chunks(micro_batch.max(1)) {
        micro_step(stage, chunk, batch.len(), projector, lm, adapters.as_deref_mut())?;
    }
    let mut out = BTreeMap::new();
    let stores = std::iter::once(projector.store()).chain(adapters.as_deref().map(LoraAdapters::store));
    for store in stores {
        for (name, t) in store.iter() {
            let g = t.grad().map_or_else(|| vec![0.0; t.numel()], <[f32]>::to_vec);
            out.insert(name.to_string(), g);
        }
    }
    Ok(out)
}

fn l2_delta(before: &ParamStore, after: &ParamStore) -> f64 {
    before
        .iter()
        .map(|(name, t)| {
            let a = after.get(name).map(Tensor::data).unwrap_or(&[]);
            t.data()
                .iter()
                .zip(a)
                .map(|(x, y)| ((x - y) as f64).powi(2))
                .sum::<f64>()
        })
        .sum::<f64>()
        .sqrt()
}

fn check_frozen(encoder: &EncoderWeights, lm: &MiniLm) -> Result<()> {
    if !encoder.is_frozen() || encoder.store().iter().any(|(_, t)| t.requires_grad()) {
        return Err(Error::FrozenViolation("encoder weights are trainable".into()));
    }
    if let Some((name, _)) = lm.store().iter().find(|(_, t)| t.requires_grad()) {
        return Err(Error::FrozenViolation(format!(
            "language-model tensor `{name}` is trainable"
        )));
    }
    Ok(())
}

/// Sample order: a fresh seeded permutation per epoch, consumed as one
/// continuous stream.
fn schedule(n: usize, cfg: &StageConfig) -> Vec<Vec<usize>> {
    let e = cfg.effective_batch;
    let total = match cfg.steps {
        Some(s) => s * e,
        None => n * cfg.epochs,
    };
    let mut order = Vec::with_capacity(total);
    let mut epoch = 0;
    while order.len() < total {
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng::stream(cfg.seed, &format!("epoch/{epoch}")));
        order.extend(perm);
        epoch += 1;
    }
    order.truncate(total);
    order.chunks(e).map(<[usize]>::to_vec).collect()
}

struct Run<'a> {
    cfg: &'a StageConfig,
    examples: &'a [TrainExample],
    encoder: &'a EncoderWeights,
    lm: &'a MiniLm,
    out: Option<&'a Path>,
}

fn run(r: Run<'_>, projector: &mut ProjectorWeights, mut adapters: Option<&mut LoraAdapters>) -> Result<TrainReport> {
    let Run {
        cfg,
        examples,
        encoder,
        lm,
        out,
    } = r;
    let started = Instant::now();
    cfg.validate()?;
    check_frozen(encoder, lm)?;
    if examples.is_empty() {
        return Err(Error::Dataset("no training examples".into()));
    }
    let stage = cfg.stage;
    let mut task_counts = BTreeMap::new();
    for ex in examples {
        *task_counts.entry(ex.task.name().to_string()).or_insert(0) += 1;
    }
    if stage == Stage::Finetune {
        for t in [Task::Caption, Task::Classification] {
            if !task_counts.contains_key(t.name()) {
                return Err(Error::Dataset(format!(
                    "finetuning needs {} samples, found none",
                    t.name()
                )));
            }
        }
    }

    projector.store_mut().set_requires_grad(true);
    if let Some(a) = adapters.as_deref_mut() {
        a.store_mut().set_requires_grad(true);
    }
    let trainable = projector.num_params() + adapters.as_deref().map_or(0, LoraAdapters::num_params);
    let expected = projector.config().lm_dim * projector.config().vision_dim
        + if projector.config().bias {
            projector.config().lm_dim
        } else {
            0
        }
        + match (stage, adapters.as_deref()) {
            (Stage::Finetune, Some(a)) => LoraAdapters::expected_params(a.config(), lm.config()),
            _ => 0,
        };
    if trainable != expected {
        return Err(Error::Config(format!(
            "{trainable} trainable parameters, closed form says {expected}"
        )));
    }

    let enc_before = encoder.to_bytes();
    let lm_before = lm.to_bytes();
    let proj_before = projector.store().clone();
    let lora_before = adapters.as_deref().map(|a| a.store().clone());

    let mut adam = AdamState::new(AdamConfig::with_lr(cfg.lr));
    let mut losses = Vec::new();
    let mut seen = 0;
    let batches = schedule(examples.len(), cfg);
    for (step, idx) in batches.iter().enumerate() {
        let batch: Vec<&TrainExample> = idx.iter().map(|&i| &examples[i]).collect();
        projector.store_mut().zero_grad();
        if let Some(a) = adapters.as_deref_mut() {
            a.store_mut().zero_grad();
        }
        let mut step_losses = Vec::with_capacity(batch.len());
        for chunk in batch.chunks(cfg.micro_batch) {
            step_losses.extend(micro_step(
                stage,
                chunk,
                batch.len(),
                projector,
                lm,
                adapters.as_deref_mut(),
            )?);
        }
        let params = projector.store_mut().iter_mut().chain(
            adapters
                .as_deref_mut()
                .into_iter()
                .flat_map(|a| a.store_mut().iter_mut()),
        );
        adam.step(params)?;
        let mean = step_losses.iter().sum::<f64>() / step_losses.len() as f64;
        losses.push(mean);
        seen += batch.len();
        if step % 10 == 0 || step + 1 == batches.len() {
            log::info!("{} step {}/{}: loss {mean:.4}", stage.name(), step + 1, batches.len());
        }
        if let (Some(dir), Some(k)) = (out, cfg.checkpoint_every) {
            if (step + 1) % k == 0 {
                let p = dir.join(format!("step_{:06}.splv", step + 1));
                save_checkpoint(&p, encoder, projector, lm, adapters.as_deref())?;
            }
        }
    }
    projector.store_mut().zero_grad();
    if let Some(a) = adapters.as_deref_mut() {
        a.store_mut().zero_grad();
    }

    if encoder.to_bytes() != enc_before {
        return Err(Error::FrozenViolation("encoder bytes changed".into()));
    }
    if lm.to_bytes() != lm_before {
        return Err(Error::FrozenViolation("language-model base bytes changed".into()));
    }
    let mut param_delta = BTreeMap::new();
    param_delta.insert("encoder".to_string(), 0.0);
    param_delta.insert("lm_base".to_string(), 0.0);
    param_delta.insert("projector".to_string(), l2_delta(&proj_before, projector.store()));
    if let (Some(b), Some(a)) = (&lora_before, adapters.as_deref()) {
        param_delta.insert("lora".to_string(), l2_delta(b, a.store()));
    }

    let checkpoint = match out {
        Some(dir) => {
            let p = dir.join(CHECKPOINT_FILE);
            save_checkpoint(&p, encoder, projector, lm, adapters.as_deref())?;
            Some(p.to_string_lossy().into_owned())
        }
        None => None,
    };
    Ok(TrainReport {
        stage,
        steps: losses.len(),
        losses,
        samples_seen: seen,
        wall_time_s: started.elapsed().as_secs_f64(),
        trainable_params: trainable,
        expected_trainable_params: expected,
        task_counts,
        param_delta,
        checkpoint,
    })
}

/// Trains the projector alone against a frozen encoder and language model.
pub fn train_alignment(
    examples: &[TrainExample],
    encoder: &EncoderWeights,
    projector: &mut ProjectorWeights,
    lm: &MiniLm,
    cfg: &StageConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.stage != Stage::Align {
        return Err(Error::Config("alignment needs an align stage config".into()));
    }
    run(
        Run {
            cfg,
            examples,
            encoder,
            lm,
            out,
        },
        projector,
        None,
    )
}

/// Trains the projector and the LoRA adapters; the encoder and the LM base
/// stay frozen.
pub fn train_finetune(
    examples: &[TrainExample],
    encoder: &EncoderWeights,
    projector: &mut ProjectorWeights,
    lm: &MiniLm,
    adapters: &mut LoraAdapters,
    cfg: &StageConfig,
    out: Option<&Path>,
) -> Result<TrainReport> {
    if cfg.stage != Stage::Finetune {
        return Err(Error::Config("finetuning needs a finetune stage config".into()));
    }
    run(
        Run {
            cfg,
            examples,
            encoder,
            lm,
            out,
        },
        projector,
        Some(adapters),
    )
}
