//! Run manifests: enough provenance to regenerate every artifact.
//!
//! A manifest records the effective config (canonical text, post
//! overrides), the digests of everything the command wrote, and coarse
//! wall-clock timings. Regeneration reads only the embedded config, so
//! "delete the artifacts and rerun from the manifest" is a supported and
//! tested workflow.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use gbselm_core::Result;
use serde::{Deserialize, Serialize};

use crate::artifacts;

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub tool_version: String,
    pub command: String,
    pub config_hash: String,
    /// Canonical key = value text of the effective configuration.
    pub config: String,
    pub seed_overrides: Vec<String>,
    /// Relative artifact path -> sha256 hex digest.
    pub artifacts: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, u64>,
}

/// Collects artifact digests and timings while a command runs, then
/// freezes them into a [`RunManifest`].
pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    config: String,
    seed_overrides: Vec<String>,
    out_dir: PathBuf,
    artifacts: BTreeMap<String, String>,
    timings_ms: BTreeMap<String, u64>,
}

impl ManifestBuilder {
    pub fn new(
        command: &str,
        config_hash: &str,
        config_text: &str,
        seed_overrides: &[String],
        out_dir: &Path,
    ) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            config: config_text.to_string(),
            seed_overrides: seed_overrides.to_vec(),
            out_dir: out_dir.to_path_buf(),
            artifacts: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    /// Registers a file under `out_dir` by digesting its current bytes.
    pub fn record(&mut self, path: &Path) -> Result<()> {
        let digest = artifacts::sha256_hex_file(path)?;
        let key = path
            .strip_prefix(&self.out_dir)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned();
        self.artifacts.insert(key, digest);
        Ok(())
    }

    pub fn time<T>(&mut self, label: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let value = f()?;
        let ms = start.elapsed().as_millis() as u64;
        *self.timings_ms.entry(label.to_string()).or_insert(0) += ms;
        Ok(value)
    }

    pub fn write(self, path: &Path) -> Result<RunManifest> {
        let manifest = RunManifest {
            version: 1,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            command: self.command,
            config_hash: self.config_hash,
            config: self.config,
            seed_overrides: self.seed_overrides,
            artifacts: self.artifacts,
            timings_ms: self.timings_ms,
        };
        artifacts::write_json(path, &manifest)?;
        Ok(manifest)
    }
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    artifacts::read_json(path)
}
