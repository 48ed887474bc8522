use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Record of one stage run: enough to re-run it and check the result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub tool_version: String,
    pub schema_version: u32,
    pub stage: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Resolved configuration, TOML.
    pub config: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn file_name(stage: &str) -> String {
        format!("{stage}.manifest.json")
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|source| CliError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| CliError::BadArtifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}
