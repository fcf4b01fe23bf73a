use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,tokens_seen,loss,ppl,lr,mode,N_L";

/// One metrics CSV row; `ppl` is empty when no evaluation ran.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub tokens_seen: u64,
    pub loss: f64,
    pub ppl: Option<f64>,
    pub lr: f64,
    pub mode: String,
    pub n_latents: usize,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:.6},{},{:.3e},{},{}",
            self.step,
            self.tokens_seen,
            self.loss,
            self.ppl.map(|p| format!("{:.4}", p)).unwrap_or_default(),
            self.lr,
            self.mode,
            self.n_latents
        )
    }
}

/// Append-only metrics CSV, flushed after every row.
#[derive(Debug)]
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path`, writing the header when the file is new or empty.
    pub fn open(path: &Path) -> Result<Self> {
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let empty = file.metadata().map_err(|e| Error::io(path, e))?.len() == 0;
        let mut w = Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if empty {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{}", s)
            .and_then(|_| self.out.flush())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.line(&row.to_csv())
    }
}
