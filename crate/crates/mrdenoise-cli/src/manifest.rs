//! Run manifests: every subcommand records what it did beside its outputs.

use crate::error::CliError;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Serialize)]
pub struct RunManifest {
    pub tool_version: &'static str,
    pub subcommand: &'static str,
    pub seed: Option<u64>,
    /// Resolved configuration / flag values for this run.
    pub config: serde_json::Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub wall_ms: u128,
}

pub struct ManifestBuilder {
    started: Instant,
    manifest: RunManifest,
}

impl ManifestBuilder {
    pub fn new(subcommand: &'static str, seed: Option<u64>, config: serde_json::Value) -> Self {
        ManifestBuilder {
            started: Instant::now(),
            manifest: RunManifest {
                tool_version: env!("CARGO_PKG_VERSION"),
                subcommand,
                seed,
                config,
                inputs: Vec::new(),
                outputs: Vec::new(),
                wall_ms: 0,
            },
        }
    }

    pub fn input(&mut self, p: &Path) {
        self.manifest.inputs.push(p.to_path_buf());
    }

    pub fn output(&mut self, p: &Path) {
        self.manifest.outputs.push(p.to_path_buf());
    }

    /// Adds a free-form field under `config`.
    pub fn note(&mut self, key: &str, value: serde_json::Value) {
        if let serde_json::Value::Object(map) = &mut self.manifest.config {
            map.insert(key.to_string(), value);
        }
    }

    pub fn write(mut self, path: &Path) -> Result<(), CliError> {
        self.manifest.wall_ms = self.started.elapsed().as_millis();
        let json = serde_json::to_vec_pretty(&self.manifest)?;
        std::fs::write(path, json)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        Ok(())
    }
}
