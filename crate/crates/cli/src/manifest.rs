//! `run_manifest.json`: the resolved job plus a hash of every artifact it
//! produced, enough to re-run the job and compare.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use spectra_core::data::manifest::sha256_file;

use crate::job::Job;

pub const RUN_MANIFEST: &str = "run_manifest.json";
/// Wall-clock measurements; never hashed.
pub const TIMING_FILE: &str = "timing.json";

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub job: Job,
    /// Relative path → SHA-256 of every artifact under the output directory.
    pub artifacts: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn new(job: Job, out: &Path) -> Result<Self> {
        Ok(Self {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            job,
            artifacts: hash_artifacts(out)?,
        })
    }

    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let p = out.join(RUN_MANIFEST);
        std::fs::write(&p, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect(&path, root, out)?;
        } else {
            let rel = path.strip_prefix(root)?.to_string_lossy().replace('\\', "/");
            if rel != RUN_MANIFEST && rel != TIMING_FILE {
                out.push(rel);
            }
        }
    }
    Ok(())
}

pub fn hash_artifacts(out: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect(out, out, &mut files)?;
    files
        .into_iter()
        .map(|rel| {
            let h = sha256_file(&out.join(&rel))?;
            Ok((rel, h))
        })
        .collect()
}

/// Human-readable differences between two artifact maps; empty when equal.
pub fn diff(expected: &BTreeMap<String, String>, found: &BTreeMap<String, String>) -> Vec<String> {
    let mut out = Vec::new();
    for (k, v) in expected {
        match found.get(k) {
            None => out.push(format!("missing {k}")),
            Some(w) if w != v => out.push(format!("changed {k}")),
            _ => {}
        }
    }
    out.extend(
        found
            .keys()
            .filter(|k| !expected.contains_key(*k))
            .map(|k| format!("unexpected {k}")),
    );
    out
}
