use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::Context;
use serde::Serialize;

/// Record of one command invocation, written as `manifest.json` in its output directory.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    /// Effective configuration after defaults, config file and flags.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub seed: u64,
    pub threads: Option<usize>,
    pub git_describe: String,
    pub started: String,
    pub finished: Option<String>,
    pub status: String,
    pub outputs: Vec<PathBuf>,
}

impl RunManifest {
    pub fn begin(command: &str, config: serde_json::Value, config_hash: String, seed: u64, threads: Option<usize>) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            config,
            config_hash,
            seed,
            threads,
            git_describe: git_describe(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: None,
            status: "running".into(),
            outputs: Vec::new(),
        }
    }

    /// Stamps the end time and status, then writes `dir/manifest.json`.
    pub fn finish(&mut self, dir: &Path, status: impl Into<String>) -> anyhow::Result<()> {
        self.finished = Some(chrono::Utc::now().to_rfc3339());
        self.status = status.into();
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn git_describe() -> String {
    let src = Path::new(env!("CARGO_MANIFEST_DIR"));
    Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .current_dir(src)
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}
