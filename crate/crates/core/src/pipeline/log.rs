//! Comma-separated training logs.
//!
//! A log has a fixed header row and one row per logging interval. Floats
//! are written with Rust's shortest round-trip formatting, so a rerun with
//! the same config and seed produces a byte-identical file.
//!
//! Flow training columns: `iter, lr, loss, fit_mse, logdet, z_mean, z_var,
//! grad_norm` — `fit_mse` is the per-element mean of `(y − D(x))²` over the
//! batch and `logdet` the batch-mean log-determinant.
//!
//! Diffusion training columns: `iter, lr, loss, loss_ema, grad_norm`, where
//! `loss_ema` is an exponential moving average with factor 0.98.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const FLOW_COLUMNS: &[&str] = &[
    "iter",
    "lr",
    "loss",
    "fit_mse",
    "logdet",
    "z_mean",
    "z_var",
    "grad_norm",
];
pub const DDPM_COLUMNS: &[&str] = &["iter", "lr", "loss", "loss_ema", "grad_norm"];

/// In-memory table optionally mirrored to a file as rows arrive.
#[derive(Debug)]
pub struct MetricsLog {
    columns: Vec<String>,
    rows: Vec<Vec<f64>>,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl MetricsLog {
    pub fn in_memory(columns: &[&str]) -> Self {
        MetricsLog {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
            sink: None,
        }
    }

    /// Creates (truncating) `path` and writes the header.
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let mut log = Self::in_memory(columns);
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        writeln!(w, "{}", log.columns.join(",")).map_err(|e| io_err(path, e))?;
        w.flush().map_err(|e| io_err(path, e))?;
        log.sink = Some((path.to_path_buf(), w));
        Ok(log)
    }

    pub fn columns(&self) -> &[String] {
        &self.columns
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    /// Values of one column, in row order.
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::shape("log row", &[self.columns.len()], &[row.len()]));
        }
        if let Some((path, w)) = &mut self.sink {
            writeln!(w, "{}", format_row(row)).map_err(|e| io_err(path, e))?;
            w.flush().map_err(|e| io_err(path, e))?;
        }
        self.rows.push(row.to_vec());
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut s = self.columns.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format_row(r));
            s.push('\n');
        }
        s
    }
}

fn format_row(row: &[f64]) -> String {
    row.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(
        e.kind(),
        format!("{}: {e}", path.display()),
    ))
}
