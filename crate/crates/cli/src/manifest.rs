use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Everything needed to repeat a run: the exact arguments, the effective
/// configuration they resolved to, and a hash of the input data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub dataset: Option<PathBuf>,
    pub dataset_sha256: Option<String>,
    pub seed: u64,
    pub artifacts: Vec<PathBuf>,
    pub started_unix: u64,
    pub wall_clock_secs: f64,
}

pub struct Recorder {
    started: Instant,
    started_unix: u64,
    manifest: RunManifest,
}

impl Recorder {
    pub fn new(command: &str, argv: &[String]) -> Self {
        let started_unix = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            started: Instant::now(),
            started_unix,
            manifest: RunManifest {
                command: command.into(),
                argv: argv.to_vec(),
                config: serde_json::Value::Null,
                dataset: None,
                dataset_sha256: None,
                seed: 0,
                artifacts: Vec::new(),
                started_unix,
                wall_clock_secs: 0.0,
            },
        }
    }

    pub fn config(&mut self, config: &impl Serialize, seed: u64) -> Result<()> {
        self.manifest.config = serde_json::to_value(config)?;
        self.manifest.seed = seed;
        Ok(())
    }

    pub fn dataset(&mut self, path: &Path) -> Result<()> {
        self.manifest.dataset = Some(path.to_path_buf());
        self.manifest.dataset_sha256 = Some(sha256_file(path)?);
        Ok(())
    }

    pub fn artifact(&mut self, path: &Path) {
        self.manifest.artifacts.push(path.to_path_buf());
    }

    pub fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.started_unix = self.started_unix;
        self.manifest.wall_clock_secs = self.started.elapsed().as_secs_f64();
        let json = serde_json::to_string_pretty(&self.manifest)?;
        trifuse::data::write_atomic(path, json.as_bytes())?;
        log::info!("manifest written to {}", path.display());
        Ok(())
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("{}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let s = std::fs::read_to_string(path).with_context(|| format!("{}", path.display()))?;
    serde_json::from_str(&s).with_context(|| format!("{}: not a run manifest", path.display()))
}

/// `<path>.<suffix>`, keeping the original extension.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}
