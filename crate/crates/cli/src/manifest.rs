//! Run manifests: every command leaves one JSON record of what it read,
//! what it wrote, and the hash of its resolved configuration, so runs are
//! auditable and reruns comparable.

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Environment variable overriding the default output directory for
/// artifacts and manifests given without an explicit path.
pub const OUT_DIR_ENV: &str = "QMAMBA_OUT_DIR";

pub fn out_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub wall_time_ms: u128,
}

pub struct ManifestBuilder {
    command: String,
    config_hash: String,
    inputs: Vec<String>,
    outputs: Vec<String>,
    started: Instant,
}

impl ManifestBuilder {
    /// `args` is the command's resolved argument set; its canonical JSON is
    /// hashed so identical invocations share a hash.
    pub fn new(command: &str, args: &impl Serialize) -> Result<Self> {
        let canon = serde_json::to_vec(args).context("hashing resolved arguments")?;
        let mut hasher = Sha256::new();
        hasher.update(command.as_bytes());
        hasher.update(&canon);
        Ok(ManifestBuilder {
            command: command.to_string(),
            config_hash: hex_digest(hasher),
            inputs: Vec::new(),
            outputs: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.display().to_string());
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.display().to_string());
    }

    /// Writes the manifest next to the first output artifact, or into the
    /// default output directory when the command produced no files.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = RunManifest {
            command: self.command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config_hash: self.config_hash,
            inputs: self.inputs,
            outputs: self.outputs.clone(),
            wall_time_ms: self.started.elapsed().as_millis(),
        };
        let path = match self.outputs.first() {
            Some(first) => PathBuf::from(format!("{first}.manifest.json")),
            None => out_dir().join(format!("{}.manifest.json", self.command)),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text)
            .with_context(|| format!("writing manifest {}", path.display()))?;
        Ok(path)
    }
}

fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}
