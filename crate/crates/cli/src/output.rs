//! Output directory handling and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;
use serde_json::Value;

/// Wall-clock time, or `SOURCE_DATE_EPOCH` when set so reruns can be
/// byte-identical.
pub fn timestamp() -> String {
    let fixed = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.trim().parse::<i64>().ok());
    let when = fixed.and_then(|secs| DateTime::<Utc>::from_timestamp(secs, 0)).unwrap_or_else(Utc::now);
    when.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: String,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub inputs: Vec<String>,
    pub config: Value,
    pub started_at: String,
    pub finished_at: String,
    pub out_dir: String,
    pub outputs: Vec<String>,
}

/// Collects artifacts for one run. Files are written in call order from the
/// main thread.
pub struct Run {
    dir: PathBuf,
    command: String,
    seed: Option<u64>,
    inputs: Vec<String>,
    config: Value,
    started_at: String,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(dir: &Path, command: &str, seed: Option<u64>, inputs: Vec<String>, config: Value) -> Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            command: command.into(),
            seed,
            inputs,
            config,
            started_at: timestamp(),
            outputs: Vec::new(),
        })
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.dir.join(name);
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(name.into());
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes `manifest.json` and returns its path.
    pub fn finish(self) -> Result<PathBuf> {
        let manifest = Manifest {
            command: self.command,
            version: env!("CARGO_PKG_VERSION"),
            seed: self.seed,
            inputs: self.inputs,
            config: self.config,
            started_at: self.started_at,
            finished_at: timestamp(),
            out_dir: self.dir.display().to_string(),
            outputs: self.outputs,
        };
        let path = self.dir.join("manifest.json");
        let mut bytes = serde_json::to_vec_pretty(&manifest)?;
        bytes.push(b'\n');
        fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}
