//! Multispectral vision-language alignment at desk scale.
//!
//! A frozen spectral transformer encoder turns a multispectral image into
//! token features, a trainable linear projector maps them into the word
//! embedding space of a small decoder-only language model, and a two-stage
//! recipe (projector alignment, then projector + LoRA finetuning) trains the
//! system. The evaluation side compares vision-only and language-grounded
//! features with linear probes.

pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod lm;
pub(crate) mod nn;
pub mod projector;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
