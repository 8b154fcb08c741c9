//! Append-only JSONL metrics with crash-safe writes.
//!
//! Appends go through write-temp-then-rename of the whole file, so a
//! crash mid-write leaves the previous contents intact. Records carry a
//! `schema` field for forward compatibility.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Result, StylexError};

pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct ClEpochRecord {
    pub schema: u32,
    pub epoch: u64,
    pub mean_loss: f64,
    pub lr: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CvaeEpochRecord {
    pub schema: u32,
    pub epoch: u64,
    pub kld: f64,
    pub recon: f64,
    pub mi_estimate: f64,
    pub total: f64,
    pub wallclock_s: f64,
}

#[derive(Debug, Clone)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        MetricsLog { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Atomically append one record: read existing content, write it plus
    /// the new line to a temp file, rename over the original.
    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        let line = serde_json::to_string(record)?;
        let mut content = match fs::read_to_string(&self.path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(StylexError::io(&self.path, e)),
        };
        content.push_str(&line);
        content.push('\n');
        if let Some(parent) = self.path.parent() {
            fs::create_dir_all(parent).map_err(|e| StylexError::io(parent, e))?;
        }
        let tmp = self.path.with_extension("jsonl.tmp");
        fs::write(&tmp, &content).map_err(|e| StylexError::io(&tmp, e))?;
        fs::rename(&tmp, &self.path).map_err(|e| StylexError::io(&self.path, e))?;
        Ok(())
    }

    /// Parse every line as JSON (for tests and resume bookkeeping).
    pub fn read_all(&self) -> Result<Vec<serde_json::Value>> {
        let content = match fs::read_to_string(&self.path) {
            Ok(c) => c,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(StylexError::io(&self.path, e)),
        };
        content
            .lines()
            .map(|l| serde_json::from_str(l).map_err(Into::into))
            .collect()
    }
}
