//! Run manifests: what produced an artifact and from which bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use pmtf_core::checkpoint::write_atomic;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::CliResult;

#[derive(Debug, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config: BTreeMap<String, String>,
    /// SHA-256 over the bytes of every input file, in the order listed.
    pub dataset_sha256: String,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<String>,
    pub started_unix_ms: u128,
    pub wall_ms: u128,
}

/// Collects manifest fields while a command runs.
pub struct ManifestBuilder {
    command: String,
    seed: u64,
    config: BTreeMap<String, String>,
    inputs: Vec<(PathBuf, Vec<u8>)>,
    outputs: Vec<String>,
    started: SystemTime,
    clock: Instant,
}

impl ManifestBuilder {
    pub fn new(command: &str, seed: u64) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed,
            config: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: SystemTime::now(),
            clock: Instant::now(),
        }
    }

    pub fn config(&mut self, key: &str, value: impl ToString) {
        self.config.insert(key.to_string(), value.to_string());
    }

    pub fn configs(&mut self, entries: BTreeMap<String, String>) {
        self.config.extend(entries);
    }

    pub fn input(&mut self, path: &Path) -> CliResult<()> {
        let bytes = fs::read(path).map_err(pmtf_core::Error::from)?;
        self.inputs.push((path.to_path_buf(), bytes));
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    pub fn finish(self) -> RunManifest {
        let mut all = Sha256::new();
        let inputs = self
            .inputs
            .iter()
            .map(|(p, bytes)| {
                all.update(bytes);
                InputFile { path: p.display().to_string(), sha256: hex::encode(Sha256::digest(bytes)) }
            })
            .collect();
        RunManifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: self.seed,
            config: self.config,
            dataset_sha256: hex::encode(all.finalize()),
            inputs,
            outputs: self.outputs,
            started_unix_ms: self.started.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
            wall_ms: self.clock.elapsed().as_millis(),
        }
    }

    pub fn write(self, path: &Path) -> CliResult<()> {
        let mut text = serde_json::to_string_pretty(&self.finish()).map_err(pmtf_core::Error::from)?;
        text.push('\n');
        write_atomic(path, text.as_bytes())?;
        Ok(())
    }
}

/// `<artifact>.manifest.json` next to a single-file artifact.
pub fn sibling_manifest(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    artifact.with_file_name(name)
}
