//! The record every command leaves next to its outputs.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_FILE: &str = "manifest.json";

/// What a run read, how it was configured and what it wrote. Holds no
/// timestamps, so equal runs give equal manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    /// The resolved config, defaults and overrides included.
    pub config: Value,
    pub seeds: Vec<u64>,
    pub output_dir: String,
    /// Input path to SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name, relative to `output_dir`, to SHA-256.
    pub artifacts: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `dir/name` and returns its checksum.
pub fn write_artifact(dir: &Path, name: &str, bytes: &[u8]) -> Result<(String, String), CliError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| CliError::io(&path, e))?;
    Ok((name.to_owned(), sha256_hex(bytes)))
}

impl RunManifest {
    pub fn write(&self, dir: &Path) -> Result<(), CliError> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))
    }
}
