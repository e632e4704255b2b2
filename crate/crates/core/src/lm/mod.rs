//! Tiny decoder-only language model with multimodal prefix splicing and
//! low-rank adapters.

mod generate;
pub mod lora;
mod model;
pub mod tokenizer;

pub use generate::{Generation, Sampling};
pub use lora::{lora_apply, LoraAdapters, LoraConfig};
pub use model::{KvCache, LmConfig, MiniLm};
pub use tokenizer::Task;
