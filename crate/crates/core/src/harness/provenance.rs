//! Provenance sidecars: enough to replay the run that produced an artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Provenance {
    /// Producing command or pipeline stage.
    pub producer: String,
    pub version: String,
    pub config_hash: String,
    /// Input artifacts (checkpoints, datasets, embedders) by role.
    pub inputs: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Free-form parameters that are not part of the config document.
    pub params: BTreeMap<String, String>,
}

impl Provenance {
    pub fn new(producer: &str, config_hash: &str) -> Self {
        Self {
            producer: producer.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: config_hash.to_string(),
            ..Self::default()
        }
    }

    pub fn input(mut self, role: &str, hash: impl Into<String>) -> Self {
        self.inputs.insert(role.to_string(), hash.into());
        self
    }

    pub fn seed(mut self, role: &str, seed: u64) -> Self {
        self.seeds.insert(role.to_string(), seed);
        self
    }

    pub fn param(mut self, key: &str, value: impl ToString) -> Self {
        self.params.insert(key.to_string(), value.to_string());
        self
    }
}

/// `<artifact>.prov.json` next to the artifact.
pub fn sidecar_path(artifact: impl AsRef<Path>) -> PathBuf {
    let p = artifact.as_ref();
    let mut name = p.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".prov.json");
    p.with_file_name(name)
}

pub fn write_sidecar(artifact: impl AsRef<Path>, prov: &Provenance) -> Result<PathBuf> {
    let path = sidecar_path(artifact);
    std::fs::write(&path, serde_json::to_string_pretty(prov)?)?;
    Ok(path)
}

pub fn read_sidecar(artifact: impl AsRef<Path>) -> Result<Provenance> {
    Ok(serde_json::from_slice(&std::fs::read(sidecar_path(artifact))?)?)
}

/// Hex SHA-256 of a file's bytes.
pub fn file_hash(path: impl AsRef<Path>) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, f: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    f(&tmp)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
