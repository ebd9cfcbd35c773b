//! Per-step training records and their JSONL sink.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    /// 0-based step index.
    pub step: usize,
    /// Cumulative training time of this process, evaluation excluded.
    pub wallclock_ms: f64,
    pub step_ms: f64,
    pub loss: f64,
    pub tokens_per_sec: f64,
    /// Layers in sharing mode during this step.
    pub share_count: usize,
    pub lr: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_loss: Option<f64>,
}

impl TrainRecord {
    /// The record with timing fields zeroed, for run-to-run comparison.
    pub fn without_timing(&self) -> Self {
        Self { wallclock_ms: 0.0, step_ms: 0.0, tokens_per_sec: 0.0, ..self.clone() }
    }
}

/// Appends one JSON object per line, flushed after every record.
pub struct MetricsWriter {
    file: File,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        Ok(Self { file: File::create(path)?, path: path.to_path_buf() })
    }

    /// Keeps only records before `step` and appends after them, so a run
    /// resumed from a checkpoint at `step` continues a clean stream.
    pub fn resume(path: &Path, step: usize) -> Result<Self> {
        let kept: Vec<TrainRecord> = if path.exists() {
            read_records(path)?.into_iter().filter(|r| r.step < step).collect()
        } else {
            Vec::new()
        };
        let mut w = Self::create(path)?;
        for r in &kept {
            w.write(r)?;
        }
        w.file = OpenOptions::new().append(true).open(path)?;
        Ok(w)
    }

    pub fn write(&mut self, record: &TrainRecord) -> Result<()> {
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn read_records(path: &Path) -> Result<Vec<TrainRecord>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
