//! Run manifests: the reproducibility envelope written beside a command's
//! primary outputs. A manifest records what ran, when, against which
//! dataset, under which fully resolved configuration (every key present,
//! each tagged with where its value came from), and the checksum of every
//! file produced. Timestamps and runtime are the only fields that differ
//! between identical runs; the primary artifacts themselves are
//! byte-stable.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::TrainConfig;
use crate::error::{Error, Result};

/// Where a resolved config value came from. Precedence when the same key
/// is given more than once: flag > file > default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfigSource {
    Default,
    File,
    Flag,
}

/// Overridden keys (canonical names) → their provenance. Keys absent here
/// resolved to the built-in default.
pub type ConfigSources = BTreeMap<String, ConfigSource>;

#[derive(Debug, Serialize)]
pub struct ConfigEntry {
    pub value: serde_json::Value,
    pub source: ConfigSource,
}

/// A file the run produced or consumed, with its SHA-256.
#[derive(Debug, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

/// The dataset a run consumed: the file path plus the logical content
/// hash of the interaction matrix (stable across re-serialization).
#[derive(Debug, Serialize)]
pub struct DatasetRef {
    pub path: String,
    pub content_hash: String,
}

#[derive(Serialize)]
pub struct RunManifest {
    pub command: String,
    pub started_at: String,
    pub finished_at: String,
    pub runtime_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetRef>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub config: Option<BTreeMap<String, ConfigEntry>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    #[serde(skip)]
    clock: Option<Instant>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn now_rfc3339() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn begin(command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            started_at: now_rfc3339(),
            finished_at: String::new(),
            runtime_s: 0.0,
            seed: None,
            dataset: None,
            config: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            clock: Some(Instant::now()),
        }
    }

    pub fn record_seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn record_dataset(&mut self, path: &Path, content_hash: &str) {
        self.dataset = Some(DatasetRef {
            path: path.display().to_string(),
            content_hash: content_hash.to_string(),
        });
    }

    /// Snapshot the complete resolved configuration. Every field of the
    /// config appears; `sources` supplies provenance for overridden keys.
    pub fn record_config(&mut self, config: &TrainConfig, sources: &ConfigSources) -> Result<()> {
        let value = serde_json::to_value(config)
            .map_err(|e| Error::Internal(format!("config does not serialize: {e}")))?;
        let object = match value {
            serde_json::Value::Object(map) => map,
            _ => return Err(Error::Internal("config did not serialize to an object".into())),
        };
        let mut snapshot = BTreeMap::new();
        for (key, value) in object {
            let source = sources.get(&key).copied().unwrap_or(ConfigSource::Default);
            snapshot.insert(key, ConfigEntry { value, source });
        }
        self.config = Some(snapshot);
        Ok(())
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        self.outputs.push(FileRef {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Stamp the end time and write pretty JSON (trailing newline).
    pub fn write(mut self, path: &Path) -> Result<()> {
        self.finished_at = now_rfc3339();
        self.runtime_s = self
            .clock
            .map(|c| c.elapsed().as_secs_f64())
            .unwrap_or(0.0);
        let mut bytes = serde_json::to_vec_pretty(&self)
            .map_err(|e| Error::Internal(format!("manifest does not serialize: {e}")))?;
        bytes.push(b'\n');
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }
}
