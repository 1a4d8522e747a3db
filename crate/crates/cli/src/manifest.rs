use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use roiscope_core::imaging::raster::write_atomic;
use roiscope_core::nn::checkpoint::sha256_hex;
use serde::Serialize;

/// Record of one CLI invocation. Everything except the two timestamps is a
/// function of the inputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub seed: Option<u64>,
    /// SHA-256 over the named input files, in the order they were added.
    pub input_sha256: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Resolved experiment config.
    pub config: String,
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

pub struct Recorder {
    command: String,
    started: u64,
    hashed: Vec<u8>,
    inputs: Vec<String>,
    outputs: Vec<PathBuf>,
}

impl Recorder {
    pub fn start(command: &str) -> Self {
        Recorder { command: command.into(), started: now(), hashed: Vec::new(), inputs: Vec::new(), outputs: Vec::new() }
    }

    pub fn input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let name = path.display().to_string();
        self.hashed.extend_from_slice(name.as_bytes());
        self.hashed.extend_from_slice(&(bytes.len() as u64).to_le_bytes());
        self.hashed.extend_from_slice(&bytes);
        self.inputs.push(name);
        Ok(())
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    /// Writes the manifest to `path`; outputs are listed relative to its directory.
    pub fn finish(self, path: &Path, seed: Option<u64>, config: String) -> Result<()> {
        let base = path.parent().unwrap_or(Path::new(""));
        let outputs = self
            .outputs
            .iter()
            .map(|p| p.strip_prefix(base).unwrap_or(p).display().to_string())
            .collect();
        let m = RunManifest {
            command: self.command,
            seed,
            input_sha256: sha256_hex(&self.hashed),
            inputs: self.inputs,
            outputs,
            started_unix: self.started,
            finished_unix: now(),
            config,
        };
        write_atomic(path, toml::to_string(&m)?.as_bytes())?;
        Ok(())
    }
}
