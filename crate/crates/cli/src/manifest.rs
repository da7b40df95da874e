use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use uglyduck_core::checkpoint::{hex_digest, CHECKPOINT_FORMAT_VERSION};
use uglyduck_core::config::PipelineConfig;
use uglyduck_core::scoring::REPORT_FORMAT_VERSION;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct FileRecord {
    pub path: String,
    pub sha256: String,
}

impl FileRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(Self { path: path.display().to_string(), sha256: hex_digest(&bytes) })
    }
}

#[derive(Debug, Serialize)]
pub struct Versions {
    pub uglyduck: &'static str,
    pub report_format: u32,
    pub checkpoint_format: u32,
}

/// Everything needed to re-run a command: argv, the effective config and digests of inputs.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub inputs: Vec<FileRecord>,
    pub outputs: Vec<String>,
    pub versions: Versions,
}

impl Manifest {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        Self {
            command: command.to_string(),
            argv: std::env::args().collect(),
            seed: cfg.seed,
            config_hash: cfg.hash(),
            config: cfg.clone(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            versions: Versions {
                uglyduck: env!("CARGO_PKG_VERSION"),
                report_format: REPORT_FORMAT_VERSION,
                checkpoint_format: CHECKPOINT_FORMAT_VERSION,
            },
        }
    }

    /// Record an input file if it exists; missing optional inputs are skipped.
    pub fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_file() {
            self.inputs.push(FileRecord::of(path)?);
        }
        Ok(())
    }

    pub fn output(&mut self, name: impl Into<String>) {
        self.outputs.push(name.into());
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
