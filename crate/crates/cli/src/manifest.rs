//! Run manifest: written before any computation output, finalized with the
//! wallclock and the produced file list.

use serde::Serialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub version: String,
    pub command: String,
    pub threads: usize,
    pub wallclock_s: Option<f64>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: u64, command: &str, threads: usize) -> Self {
        Self {
            config_hash,
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            threads,
            wallclock_s: None,
            outputs: Vec::new(),
        }
    }

    pub fn path(out_dir: &Path) -> PathBuf {
        out_dir.join("manifest.json")
    }

    pub fn write(&self, out_dir: &Path) -> anyhow::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(Self::path(out_dir), text + "\n")?;
        Ok(())
    }

    pub fn record(&mut self, path: &Path) {
        self.outputs
            .push(path.file_name().unwrap().to_string_lossy().to_string());
    }
}
