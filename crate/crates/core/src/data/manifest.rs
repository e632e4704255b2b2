//! Dataset manifests: counts, class vocabulary and a content hash over every
//! referenced file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub version: String,
    pub sample_count: usize,
    pub classes: Vec<String>,
    pub split_counts: BTreeMap<String, usize>,
    /// Samples dropped because their caption could not be produced.
    #[serde(default)]
    pub skipped: usize,
    /// Paths relative to the manifest's directory, sorted.
    pub files: Vec<String>,
    pub content_hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path).map_err(|e| Error::file(path, e))?))
}

/// Hash of `(path, file digest)` pairs, so renames and single-byte edits
/// both change it.
pub fn hash_files(root: &Path, files: &[String]) -> Result<String> {
    let mut sorted: Vec<&String> = files.iter().collect();
    sorted.sort();
    let mut h = Sha256::new();
    for rel in sorted {
        h.update(rel.as_bytes());
        h.update([0u8]);
        h.update(sha256_file(&root.join(rel))?.as_bytes());
        h.update(b"\n");
    }
    Ok(hex::encode(h.finalize()))
}

impl DatasetManifest {
    pub fn new(
        name: &str,
        root: &Path,
        classes: Vec<String>,
        split_counts: BTreeMap<String, usize>,
        skipped: usize,
        mut files: Vec<String>,
    ) -> Result<Self> {
        files.sort();
        files.dedup();
        let content_hash = hash_files(root, &files)?;
        Ok(Self {
            name: name.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            sample_count: split_counts.values().sum(),
            classes,
            split_counts,
            skipped,
            files,
            content_hash,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::file(&path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::file(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Recomputes the content hash; `Ok(false)` means some file changed.
    pub fn verify(&self, root: &Path) -> Result<bool> {
        Ok(hash_files(root, &self.files)? == self.content_hash
            && self.split_counts.values().sum::<usize>() == self.sample_count)
    }
}
