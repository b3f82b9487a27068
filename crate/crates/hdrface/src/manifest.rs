use std::path::{Path, PathBuf};

use chrono::{SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::write_atomic;
use crate::error::{HdrError, Result};

pub const FILE_NAME: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Finished,
    Failed,
}

/// Record of one CLI invocation, kept next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Vec<String>,
    /// SHA-256 of the config text the run used, if it read one.
    pub config_hash: Option<String>,
    pub seed: u64,
    pub version: String,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: RunStatus,
    pub outputs: Vec<PathBuf>,
}

pub fn version_string() -> String {
    format!("hdrface {}", env!("CARGO_PKG_VERSION"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn now() -> String {
    Utc::now().to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl RunManifest {
    pub fn start(command: Vec<String>, config_text: Option<&str>, seed: u64) -> Self {
        RunManifest {
            command,
            config_hash: config_text.map(|t| sha256_hex(t.as_bytes())),
            seed,
            version: version_string(),
            started_at: now(),
            finished_at: None,
            status: RunStatus::Running,
            outputs: Vec::new(),
        }
    }

    pub fn finish(&mut self, status: RunStatus) {
        self.finished_at = Some(now());
        self.status = status;
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_vec_pretty(self).map_err(|source| HdrError::Json { context: "manifest".into(), source })?;
        write_atomic(&dir.join(FILE_NAME), &json)
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(FILE_NAME);
        let text = std::fs::read(&path).map_err(|e| HdrError::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|source| HdrError::Json { context: path.display().to_string(), source })
    }
}
