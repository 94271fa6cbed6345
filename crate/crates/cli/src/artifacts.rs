//! Results directory layout. Every file of a run goes through one writer.
//!
//! ```text
//! config.toml          canonical config snapshot
//! config.sha256        SHA-256 of config.toml
//! metrics.csv          trace of the (selected) model
//! metrics_<name>.csv   trace of every other model of a sweep or continual run
//! summary.json         final numbers; only `wall_time_s` varies between reruns
//! checkpoint.json      trained readout of the (selected) model
//! surface.csv          sweep results, one row per grid point (sweeps only)
//! ```
//!
//! Trace CSVs start with `# key: value` lines (schema version, config hash,
//! seed, git describe, wall time) followed by the fixed header
//! `step,split,loss,accuracy,rmse,sparsity,force1_mean,force2_mean,specialization_mean`.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use serde::Serialize;
use sparce::learning::MetricTrace;

use crate::config::ExperimentConfig;
use crate::CliError;

pub struct ResultsWriter {
    dir: PathBuf,
    meta: Vec<(&'static str, String)>,
}

fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

impl ResultsWriter {
    /// Creates the directory and writes the config snapshot and its hash.
    pub fn create(cfg: &ExperimentConfig) -> Result<Self, CliError> {
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(&dir)?;
        let snapshot = cfg.snapshot();
        let hash = cfg.hash();
        fs::write(dir.join("config.toml"), &snapshot)?;
        fs::write(dir.join("config.sha256"), format!("{hash}\n"))?;
        let meta = vec![("config_hash", hash), ("seed", cfg.seed.to_string()), ("git_describe", git_describe())];
        Ok(Self { dir, meta })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn trace(&self, name: Option<&str>, trace: &MetricTrace, wall_time_s: f64) -> Result<(), CliError> {
        let file = match name {
            None => "metrics.csv".to_string(),
            Some(n) => format!("metrics_{}.csv", sanitize(n)),
        };
        let mut meta = self.meta.clone();
        meta.push(("wall_time_s", format!("{wall_time_s:.3}")));
        fs::write(self.dir.join(file), trace.to_csv(&meta))?;
        Ok(())
    }

    pub fn json(&self, file: &str, value: &impl Serialize) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Other(e.to_string()))?;
        fs::write(self.dir.join(file), text + "\n")?;
        Ok(())
    }

    pub fn text(&self, file: &str, body: &str) -> Result<(), CliError> {
        fs::write(self.dir.join(file), body)?;
        Ok(())
    }
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}
