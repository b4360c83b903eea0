//! Run manifest: written when a command starts and finalized when it ends.

use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Running,
    Ok,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    /// SHA-256 of the resolved experiment config as written to `config.json`.
    pub config_sha256: String,
    pub seed: u64,
    pub started_unix_ms: u128,
    pub finished_unix_ms: Option<u128>,
    pub status: RunStatus,
    pub error: Option<String>,
    pub files: Vec<FileEntry>,
    #[serde(skip)]
    dir: PathBuf,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn begin(dir: &Path, command: &str, config_json: &str, seed: u64) -> Result<Self> {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create output directory {}", dir.display()))?;
        let manifest = Self {
            command: command.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            seed,
            started_unix_ms: now_ms(),
            finished_unix_ms: None,
            status: RunStatus::Running,
            error: None,
            files: Vec::new(),
            dir: dir.to_path_buf(),
        };
        manifest.write()?;
        Ok(manifest)
    }

    /// Writes `contents` to `name` inside the run directory and records it.
    pub fn write_file(&mut self, name: &str, contents: &[u8]) -> Result<PathBuf> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display()))?;
        let entry = FileEntry {
            path: name.into(),
            bytes: contents.len() as u64,
            sha256: sha256_hex(contents),
        };
        match self.files.iter_mut().find(|f| f.path == name) {
            Some(f) => *f = entry,
            None => self.files.push(entry),
        }
        Ok(path)
    }

    pub fn finish(mut self, outcome: &Result<()>) -> Result<()> {
        self.finished_unix_ms = Some(now_ms());
        match outcome {
            Ok(()) => self.status = RunStatus::Ok,
            Err(e) => {
                self.status = RunStatus::Failed;
                self.error = Some(format!("{e:#}"));
            }
        }
        self.write()
    }

    fn write(&self) -> Result<()> {
        let path = self.dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(self)? + "\n")
            .with_context(|| format!("cannot write {}", path.display()))
    }
}
