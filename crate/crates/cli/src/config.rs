//! TOML run configuration. Each table is overlaid on the built-in defaults
//! of its section; flags are applied afterwards and win.

use std::fmt;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

/// A mistake in how the tool was invoked (exit code 1).
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Debug, Default)]
pub struct ConfigFile {
    root: serde_json::Map<String, Value>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
        match serde_json::to_value(table)? {
            Value::Object(root) => Ok(Self { root }),
            _ => unreachable!("a TOML document is a table"),
        }
    }

    pub fn seed(&self) -> Result<Option<u64>> {
        match self.root.get("seed") {
            None => Ok(None),
            Some(v) => v
                .as_u64()
                .map(Some)
                .ok_or_else(|| usage(format!("config: seed must be a non-negative integer, got {v}"))),
        }
    }

    /// `base` with the `[name]` table laid over it. Keys the section does not
    /// know are rejected.
    pub fn section<T: Serialize + DeserializeOwned>(&self, name: &str, base: T) -> Result<T> {
        let Some(over) = self.root.get(name) else {
            return Ok(base);
        };
        let mut value = serde_json::to_value(&base)?;
        overlay(&mut value, over, name)?;
        serde_json::from_value(value).map_err(|e| usage(format!("config [{name}]: {e}")))
    }
}

fn overlay(base: &mut Value, over: &Value, path: &str) -> Result<()> {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                let here = format!("{path}.{k}");
                match b.get_mut(k) {
                    Some(slot) => overlay(slot, v, &here)?,
                    None => return Err(usage(format!("config: unknown key `{here}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v.clone();
            Ok(())
        }
    }
}
