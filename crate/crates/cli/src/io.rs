//! File plumbing shared by every command: atomic writes, hashing, and the
//! per-run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).with_context(|| format!("reading {}", path.display()))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

#[derive(Debug, Serialize)]
pub struct Artifact {
    pub path: String,
    pub sha256: String,
}

impl Artifact {
    pub fn of(path: &Path, bytes: &[u8]) -> Self {
        Self {
            path: path.display().to_string(),
            sha256: sha256_hex(bytes),
        }
    }
}

/// What a run consumed and produced, written once next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: u64,
    pub inputs: Vec<Artifact>,
    pub outputs: Vec<Artifact>,
    pub wall_time_s: f64,
}

pub struct Run {
    command: &'static str,
    config: String,
    seed: u64,
    started: Instant,
    inputs: Vec<Artifact>,
    outputs: Vec<Artifact>,
}

impl Run {
    pub fn start(command: &'static str, config: String, seed: u64) -> Self {
        Self {
            command,
            config,
            seed,
            started: Instant::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn set_config(&mut self, config: String, seed: u64) {
        self.config = config;
        self.seed = seed;
    }

    /// Reads an input file and records its hash.
    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = read(path)?;
        self.inputs.push(Artifact::of(path, &bytes));
        Ok(bytes)
    }

    /// Writes an output file atomically and records its hash. A path written
    /// twice keeps only its latest hash.
    pub fn output(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        let a = Artifact::of(path, bytes);
        match self.outputs.iter_mut().find(|o| o.path == a.path) {
            Some(o) => *o = a,
            None => self.outputs.push(a),
        }
        Ok(())
    }

    pub fn finish(self, manifest: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.into(),
            config: self.config,
            seed: self.seed,
            inputs: self.inputs,
            outputs: self.outputs,
            wall_time_s: self.started.elapsed().as_secs_f64(),
        };
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        write_atomic(manifest, text.as_bytes())
    }
}

/// `<path>.manifest.json`, or `<dir>/manifest.json` for directory outputs.
pub fn manifest_path(output: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        output.join("manifest.json")
    } else {
        let mut s = output.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }
}
