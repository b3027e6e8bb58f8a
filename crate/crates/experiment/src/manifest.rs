//! Run manifests, output verification and run-directory locks.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{ErrorKind, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use seqdistill::digest::file_sha256;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".lock";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Record of one completed stage or run. Written once, after every output
/// file is in place.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// `ingest`, `profile` or `train`.
    pub kind: String,
    pub config_digest: String,
    pub code_version: String,
    #[serde(default)]
    pub seed: Option<u64>,
    /// Unix seconds.
    pub started_at: u64,
    pub finished_at: u64,
    /// Digests of the artifacts this stage read, by name.
    pub inputs: BTreeMap<String, String>,
    /// Digests of the files this stage wrote, by file name.
    pub outputs: BTreeMap<String, String>,
    /// Resolved settings sufficient to rerun the stage.
    #[serde(default)]
    pub spec: Option<serde_json::Value>,
}

pub fn now_secs() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn digest_file(path: &Path) -> Result<String> {
    file_sha256(path)
        .map_err(|e| CliError::Artifact(format!("cannot read {}: {e}", path.display())))
}

/// Digests of `names` inside `dir`.
pub fn digest_outputs(dir: &Path, names: &[&str]) -> Result<BTreeMap<String, String>> {
    names
        .iter()
        .map(|n| Ok((n.to_string(), digest_file(&dir.join(n))?)))
        .collect()
}

impl Manifest {
    pub fn path(dir: &Path) -> PathBuf {
        dir.join(MANIFEST_FILE)
    }

    pub fn read(dir: &Path) -> Result<Option<Self>> {
        let path = Self::path(dir);
        match fs::read_to_string(&path) {
            Ok(text) => serde_json::from_str(&text)
                .map(Some)
                .map_err(|e| CliError::Artifact(format!("{} is corrupt: {e}", path.display()))),
            Err(e) if e.kind() == ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file and rename so a reader never sees a
    /// partial manifest.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join(format!("{MANIFEST_FILE}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(self)? + "\n")?;
        fs::rename(&tmp, Self::path(dir))?;
        Ok(())
    }

    /// First output whose file is missing or differs from its digest.
    pub fn verify_outputs(&self, dir: &Path) -> Option<String> {
        self.outputs
            .iter()
            .find_map(|(name, want)| match file_sha256(&dir.join(name)) {
                Ok(got) if &got == want => None,
                Ok(_) => Some(format!("{name} was modified")),
                Err(_) => Some(format!("{name} is missing")),
            })
    }

    /// First input whose recorded digest differs from `current`.
    pub fn stale_input(&self, current: &BTreeMap<String, String>) -> Option<String> {
        if self.inputs.len() != current.len() {
            let recorded: Vec<_> = self.inputs.keys().collect();
            let now: Vec<_> = current.keys().collect();
            return Some(format!("inputs changed from {recorded:?} to {now:?}"));
        }
        self.inputs
            .iter()
            .find_map(|(name, want)| match current.get(name) {
                Some(got) if got == want => None,
                _ => Some(name.clone()),
            })
    }
}

/// Exclusive writer lock on a run directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self { path })
            }
            Err(e) if e.kind() == ErrorKind::AlreadyExists => {
                let holder = fs::read_to_string(&path).unwrap_or_default();
                Err(CliError::Locked(format!(
                    "{} is locked by process {}; remove {} if that process is gone",
                    dir.display(),
                    holder.trim(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
