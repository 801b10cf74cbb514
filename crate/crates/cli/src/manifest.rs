use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::commands::Command;

/// Everything needed to rerun a command, plus what it produced.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// The parsed arguments; `replay` runs exactly this.
    pub config: Command,
    pub seeds: Vec<u64>,
    pub started_unix: f64,
    pub finished_unix: f64,
    /// SHA-256 of the executable that produced the outputs.
    pub code_digest: String,
    pub outputs: Vec<PathBuf>,
    pub passed: bool,
}

pub fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

pub fn code_digest() -> String {
    std::env::current_exe().and_then(std::fs::read).map_or_else(
        |_| "unknown".to_string(),
        |bytes| hex::encode(Sha256::digest(bytes)),
    )
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> anyhow::Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
