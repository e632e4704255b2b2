//! Two-stage training: projector-only alignment, then projector + LoRA
//! instruction finetuning. The encoder and the language-model base never
//! receive an update.

mod sequence;
mod stage;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use sequence::{make_training_sequence, TrainingSequence};
pub use stage::{
    accumulate_gradients, load_checkpoint, prepare_examples, save_checkpoint, train_alignment, train_finetune,
    Checkpoint, TrainExample,
};

use crate::data::Split;
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, LoraConfig, Task};
use crate::projector::ProjectorConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.splv";
pub const REPORT_FILE: &str = "report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Align,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Align => "align",
            Stage::Finetune => "finetune",
        }
    }
}

/// Architecture of every component; stored next to checkpoints so they can
/// be reloaded.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub lm: LmConfig,
    pub projector_bias: bool,
    pub lora: LoraConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            lm: LmConfig::default(),
            projector_bias: true,
            lora: LoraConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn projector(&self) -> ProjectorConfig {
        ProjectorConfig {
            vision_dim: self.encoder.dim,
            lm_dim: self.lm.dim,
            bias: self.projector_bias,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.lm.validate()?;
        if self.lora.rank == 0 {
            return Err(Error::Config("LoRA rank must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub stage: Stage,
    /// Samples per optimizer step.
    pub effective_batch: usize,
    /// Samples per forward/backward pass; must divide `effective_batch`.
    pub micro_batch: usize,
    pub epochs: usize,
    /// Optimizer-step budget; overrides `epochs` when set.
    pub steps: Option<usize>,
    pub lr: f32,
    pub seed: u64,
    pub image_size: usize,
    /// Tasks drawn from the instruction set.
    pub tasks: Vec<Task>,
    /// `None` trains on every split.
    pub split: Option<Split>,
    /// Also write a checkpoint every k optimizer steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for StageConfig {
    fn default() -> Self {
        Self::align()
    }
}

impl StageConfig {
    pub fn align() -> Self {
        Self {
            stage: Stage::Align,
            effective_batch: 8,
            micro_batch: 1,
            epochs: 1,
            steps: None,
            lr: 1e-3,
            seed: 0,
            image_size: 128,
            tasks: vec![Task::Caption],
            split: Some(Split::Train),
            checkpoint_every: None,
        }
    }

    pub fn finetune() -> Self {
        Self {
            stage: Stage::Finetune,
            effective_batch: 64,
            micro_batch: 8,
            epochs: 1,
            lr: 2e-4,
            tasks: vec![Task::Caption, Task::Classification],
            ..Self::align()
        }
    }

    pub fn for_stage(stage: Stage) -> Self {
        match stage {
            Stage::Align => Self::align(),
            Stage::Finetune => Self::finetune(),
        }
    }

    pub fn accumulation_steps(&self) -> usize {
        self.effective_batch / self.micro_batch.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.effective_batch == 0 || self.micro_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !self.effective_batch.is_multiple_of(self.micro_batch) {
            return Err(Error::Config(format!(
                "effective batch {} is not a multiple of micro-batch {}",
                self.effective_batch, self.micro_batch
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.steps.is_none() && self.epochs == 0 {
            return Err(Error::Config("set epochs ≥ 1 or a step budget".into()));
        }
        if self.steps == Some(0) {
            return Err(Error::Config("step budget must be positive".into()));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("at least one task must be selected".into()));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::Config("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: Stage,
    /// Mean per-sample loss of every optimizer step.
    pub losses: Vec<f64>,
    pub steps: usize,
    pub samples_seen: usize,
    pub wall_time_s: f64,
    pub trainable_params: usize,
    pub expected_trainable_params: usize,
    pub task_counts: BTreeMap<String, usize>,
    /// L2 norm of the parameter change per component.
    pub param_delta: BTreeMap<String, f64>,
    pub checkpoint: Option<String>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> Option<f64> {
        self.losses.first().copied()
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.losses.last().copied()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_defaults() {
        let a = StageConfig::align();
        assert_eq!((a.effective_batch, a.lr), (8, 1e-3));
        let f = StageConfig::finetune();
        assert_eq!((f.effective_batch, f.lr, f.epochs, f.image_size), (64, 2e-4, 1, 128));
        assert_eq!(f.accumulation_steps() * f.micro_batch, f.effective_batch);
        a.validate().unwrap();
        f.validate().unwrap();
    }

    #[test]
    fn inexact_factorisation_rejected() {
        let c = StageConfig {
            effective_batch: 8,
            micro_batch: 3,
            ..StageConfig::align()
        };
        assert!(c.validate().is_err());
    }
}
