//! Per-run record of what a command did, enough to run it again.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the binary name; replaying them repeats the run.
    pub args: Vec<String>,
    /// Model or run configuration as `key=value` lines.
    pub config: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    /// Seconds per named phase.
    pub timings: BTreeMap<String, f64>,
    pub notes: Vec<String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, args: &[String]) -> Self {
        RunManifest {
            command: command.to_string(),
            args: args.to_vec(),
            config: String::new(),
            inputs: vec![],
            outputs: vec![],
            timings: BTreeMap::new(),
            notes: vec![],
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn time(&mut self, phase: &str, d: Duration) {
        *self.timings.entry(phase.to_string()).or_default() += d.as_secs_f64();
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Equal apart from wall-clock timings.
    pub fn same_run(&self, other: &RunManifest) -> bool {
        RunManifest {
            timings: BTreeMap::new(),
            ..self.clone()
        } == RunManifest {
            timings: BTreeMap::new(),
            ..other.clone()
        }
    }
}
