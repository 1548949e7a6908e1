//! `manifest.json`: what produced a run directory, written before training
//! starts and finalized at exit.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// The flat configuration snapshot, one `key = value` per entry.
    pub config: Vec<String>,
    pub seed: u64,
    pub code_version: String,
    pub workers: usize,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    /// `running`, `complete` or `failed: <reason>`.
    pub status: String,
    /// Files in the run directory, relative to it. Only files that exist.
    pub artifacts: Vec<String>,
}

pub fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

impl RunManifest {
    pub fn start(config_flat: &str, seed: u64, workers: usize) -> Self {
        RunManifest {
            command: std::env::args().collect(),
            config: config_flat.lines().map(str::to_string).collect(),
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            workers,
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            artifacts: Vec::new(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }

    /// Record the end state, keeping only artifacts that exist.
    pub fn finish(&mut self, dir: &Path, status: &str, candidates: &[PathBuf]) -> Result<()> {
        self.finished_unix = Some(unix_now());
        self.status = status.to_string();
        self.artifacts = candidates
            .iter()
            .filter(|p| p.exists())
            .filter_map(|p| p.strip_prefix(dir).ok().map(|r| r.display().to_string()))
            .collect();
        self.write(dir)
    }
}
