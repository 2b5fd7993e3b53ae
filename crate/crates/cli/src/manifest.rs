//! `manifest.json`: what was run, with which resolved configuration, and how
//! it ended. Written before work starts and rewritten at exit.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Result;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub git_describe: String,
    pub started_unix: u64,
    pub wall_clock_secs: Option<f64>,
    pub status: String,
    #[serde(skip)]
    started: Instant,
    #[serde(skip)]
    path: Option<PathBuf>,
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
    pub fn new(command: &str, threads: usize) -> Self {
        Self {
            command: command.into(),
            argv: std::env::args().collect(),
            config: Value::Null,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            threads,
            git_describe: git_describe(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            wall_clock_secs: None,
            status: "running".into(),
            started: Instant::now(),
            path: None,
        }
    }

    pub fn config(mut self, config: &impl Serialize) -> Self {
        self.config = serde_json::to_value(config).unwrap_or(Value::Null);
        self
    }

    pub fn input(mut self, p: &Path) -> Self {
        self.inputs.push(p.to_path_buf());
        self
    }

    pub fn output(mut self, p: &Path) -> Self {
        self.outputs.push(p.to_path_buf());
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    /// Starts recording into `path`. Without a path the manifest stays in
    /// memory.
    pub fn start(mut self, path: Option<PathBuf>) -> Result<Self> {
        if let Some(path) = path {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            self.path = Some(path);
            self.write()?;
        }
        Ok(self)
    }

    pub fn finish(&mut self, outcome: &Result<()>) -> Result<()> {
        self.wall_clock_secs = Some(self.started.elapsed().as_secs_f64());
        self.status = match outcome {
            Ok(()) => "ok".into(),
            Err(e) => format!("error: {e:#}"),
        };
        self.write()
    }

    fn write(&self) -> Result<()> {
        if let Some(path) = &self.path {
            std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        }
        Ok(())
    }
}
