use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stp_core::StpConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Record of the command, config and outputs behind one artifact directory.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: String,
    pub ablation: String,
    pub git_describe: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<PathBuf>,
}

/// SHA-256 of the canonical config text, hex encoded.
pub fn config_hash(cfg: &StpConfig) -> String {
    let digest = Sha256::digest(cfg.to_text().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

impl RunManifest {
    pub fn start(command: &str, cfg: &StpConfig) -> Self {
        Self {
            command: command.into(),
            seed: cfg.seed,
            config_hash: config_hash(cfg),
            config: cfg.to_text(),
            ablation: cfg.ablation.label(),
            git_describe: git_describe(),
            started_unix: now_unix(),
            finished_unix: 0,
            outputs: Vec::new(),
        }
    }

    pub fn finish(mut self, dir: &Path, outputs: Vec<PathBuf>) -> Result<()> {
        self.finished_unix = now_unix();
        self.outputs = outputs;
        let text = serde_json::to_string_pretty(&self)? + "\n";
        std::fs::write(dir.join(MANIFEST_FILE), text).with_context(|| format!("writing manifest in {}", dir.display()))
    }
}
