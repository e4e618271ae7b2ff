use std::fs;
use std::path::PathBuf;

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub duration_secs: f64,
    /// SHA-256 over the input files' bytes and the effective settings.
    pub input_hash: String,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, artifacts: Vec<PathBuf>, input_hash: String) -> Self {
        Self {
            command: command.into(),
            config,
            seed,
            artifacts,
            duration_secs: 0.0,
            input_hash,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Hex SHA-256 of each file (length-prefixed, in order) followed by `settings`.
pub fn hash_inputs(files: &[PathBuf], settings: &str) -> Result<String, CliError> {
    let mut h = Sha256::new();
    for f in files {
        let bytes = fs::read(f).map_err(|source| CliError::Io {
            path: f.clone(),
            source,
        })?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
    }
    h.update(settings.as_bytes());
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}
