//! Append-only JSONL metrics stream: one object per training step.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use hdrface_core::train::StepMetrics;
use serde::{Deserialize, Serialize};

use crate::error::{HdrError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub rec: f64,
    pub per: f64,
    pub id: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub total: f64,
    pub clean_skips: usize,
}

impl From<&StepMetrics> for MetricRecord {
    fn from(m: &StepMetrics) -> Self {
        MetricRecord {
            step: m.step,
            rec: m.rec,
            per: m.per,
            id: m.id,
            gan_g: m.gan_g,
            gan_d: m.gan_d,
            total: m.total,
            clean_skips: m.clean_skips,
        }
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path` for appending, first dropping any records past `keep_through`.
    /// A resumed run thereby continues the stream of the checkpoint it started from.
    pub fn open(path: &Path, keep_through: u64) -> Result<Self> {
        let kept: Vec<MetricRecord> = if path.exists() { read(path)?.into_iter().filter(|r| r.step <= keep_through).collect() } else { Vec::new() };
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(path).map_err(|e| HdrError::io(path, e))?;
        let mut w = MetricsWriter { path: path.to_path_buf(), out: BufWriter::new(file) };
        for r in &kept {
            w.write(r)?;
        }
        Ok(w)
    }

    pub fn write(&mut self, record: &MetricRecord) -> Result<()> {
        let line = serde_json::to_string(record).map_err(|source| HdrError::Json { context: "metrics record".into(), source })?;
        writeln!(self.out, "{line}").map_err(|e| HdrError::io(&self.path, e))?;
        self.out.flush().map_err(|e| HdrError::io(&self.path, e))
    }
}

pub fn read(path: &Path) -> Result<Vec<MetricRecord>> {
    let file = File::open(path).map_err(|e| HdrError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| HdrError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|source| HdrError::Json { context: format!("{}:{}", path.display(), i + 1), source })?;
        out.push(rec);
    }
    Ok(out)
}
