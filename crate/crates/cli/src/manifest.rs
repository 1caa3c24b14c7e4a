//! Per-output-directory run manifest.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config: Map<String, Value>,
    pub seeds: BTreeMap<String, u64>,
    pub feeder_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub dataset_hash: Option<String>,
    /// SHA-256 of every file the command wrote, keyed by file name.
    pub outputs: BTreeMap<String, String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String, CliError> {
    std::fs::read(path)
        .map(|b| sha256_hex(&b))
        .map_err(|e| CliError::runtime(format!("cannot read {}: {e}", path.display())))
}

impl RunManifest {
    pub fn new(command: &str, config: Map<String, Value>) -> Self {
        Self {
            command: command.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
            seeds: BTreeMap::new(),
            feeder_hash: None,
            checkpoint_hash: None,
            dataset_hash: None,
            outputs: BTreeMap::new(),
            started_unix: unix_now(),
            finished_unix: 0,
        }
    }

    /// Hashes the listed outputs and writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, outputs: &[String]) -> Result<(), CliError> {
        for name in outputs {
            self.outputs.insert(name.clone(), file_hash(&dir.join(name))?);
        }
        self.finished_unix = unix_now();
        let text = serde_json::to_string_pretty(&self).expect("manifest serializes");
        write_file(&dir.join(MANIFEST_FILE), text.as_bytes())
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}
