//! Byte-level tokenizer with six special tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 256;
pub const BOS: u32 = 257;
pub const EOS: u32 = 258;
pub const IMG: u32 = 259;
pub const CAPTION: u32 = 260;
pub const CLASSIFICATION: u32 = 261;
pub const VOCAB_SIZE: usize = 262;

const SPECIAL_NAMES: [&str; 6] = ["[PAD]", "[BOS]", "[EOS]", "[IMG]", "[CAPTION]", "[CLASSIFICATION]"];

/// Task indicator placed after the image in every prompt.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "[CAPTION]")]
    Caption,
    #[serde(rename = "[CLASSIFICATION]")]
    Classification,
}

impl Task {
    pub fn token(self) -> u32 {
        match self {
            Task::Caption => CAPTION,
            Task::Classification => CLASSIFICATION,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Caption => "[CAPTION]",
            Task::Classification => "[CLASSIFICATION]",
        }
    }

    /// Accepts `caption`, `classification` or the bracketed token names.
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "caption" | "[caption]" => Some(Task::Caption),
            "classification" | "[classification]" => Some(Task::Classification),
            _ => None,
        }
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Bytes are decoded as UTF-8 (lossily, since sampled output may split a
/// code point); special tokens render as their bracketed names.
pub fn detokenize(ids: &[u32]) -> Result<String> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            PAD..=CLASSIFICATION => bytes.extend_from_slice(SPECIAL_NAMES[(id - PAD) as usize].as_bytes()),
            _ => return Err(Error::TokenOutOfRange(id)),
        }
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// `[BOS][IMG]<task><instruction>\n`
pub fn prompt(task: Task, instruction: &str) -> Vec<u32> {
    let mut ids = Vec::with_capacity(instruction.len() + 4);
    ids.push(BOS);
    ids.push(IMG);
    ids.push(task.token());
    ids.extend(tokenize(instruction));
    ids.push(b'\n' as u32);
    ids
}
