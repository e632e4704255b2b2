use std::path::Path;

use serde::{Deserialize, Serialize};

use super::csv_file_error;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub id: String,
    pub score: f64,
}

/// Fraction of `labels` that occur in `description` as whole words,
/// ignoring case. An empty label list scores 0.
pub fn label_coverage_score(description: &str, labels: &[String]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let text = description.to_lowercase();
    let hits = labels
        .iter()
        .filter(|l| contains_word(&text, &l.trim().to_lowercase()))
        .count();
    hits as f64 / labels.len() as f64
}

fn contains_word(text: &str, word: &str) -> bool {
    if word.is_empty() {
        return false;
    }
    let is_word = |c: Option<char>| c.is_some_and(|c| c.is_alphanumeric() || c == '_');
    text.match_indices(word)
        .any(|(i, _)| !is_word(text[..i].chars().next_back()) && !is_word(text[i + word.len()..].chars().next()))
}

/// `id,score`.
pub fn write_scores_csv(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| csv_file_error(path, e))?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::file(path, e))
}
