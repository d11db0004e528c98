use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

pub const RUN_MANIFEST_FILE: &str = "run_manifest.json";

/// Record of one invocation, written into the output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    /// Effective configuration after file values and flag overrides.
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub tool_version: String,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
    /// `"ok"` or `"error"`.
    pub status: String,
    pub error: Option<String>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

/// What a subcommand has resolved so far. The manifest is only written once
/// `out` is known, i.e. after flag validation.
pub struct Run {
    pub subcommand: &'static str,
    pub config: BTreeMap<String, String>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    started: u64,
}

impl Run {
    pub fn new(subcommand: &'static str) -> Self {
        Self {
            subcommand,
            config: BTreeMap::new(),
            seed: None,
            out: None,
            started: now_ms(),
        }
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl ToString) {
        self.config.insert(key.into(), value.to_string());
    }

    pub fn finish(&self, error: Option<String>) -> RunManifest {
        RunManifest {
            subcommand: self.subcommand.to_string(),
            config: self.config.clone(),
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started_unix_ms: self.started,
            finished_unix_ms: now_ms(),
            status: if error.is_none() { "ok" } else { "error" }.to_string(),
            error,
        }
    }
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
    fs::write(dir.join(RUN_MANIFEST_FILE), text + "\n")
}
