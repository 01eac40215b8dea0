//! CSV rows and JSON metadata.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::replica::{Branch, CurveRecord};

use super::config::{ConfigPoint, Mode};

/// One curve row. Field order is the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputRow {
    pub mode: String,
    pub config_hash: String,
    pub c_pt: f64,
    pub lambda_pt: f64,
    pub gamma_ft: f64,
    pub rho_pt: f64,
    pub rho_sh: f64,
    pub rho_new: f64,
    pub alpha: f64,
    pub seed: u64,
    pub mse: f64,
    pub mse_se_db: f64,
    pub residual: f64,
    pub branch: Branch,
    pub branch_mismatch_db: f64,
    pub converged: bool,
    pub wall_ms: f64,
}

pub const CURVE_HEADER: [&str; 17] = [
    "mode",
    "config_hash",
    "c_pt",
    "lambda_pt",
    "gamma_ft",
    "rho_pt",
    "rho_sh",
    "rho_new",
    "alpha",
    "seed",
    "mse",
    "mse_se_db",
    "residual",
    "branch",
    "branch_mismatch_db",
    "converged",
    "wall_ms",
];

impl OutputRow {
    pub fn new(mode: Mode, hash: &str, point: &ConfigPoint, rec: &CurveRecord, wall_ms: f64) -> Self {
        let (rho_pt, rho_sh, rho_new) = point.task.rho_columns();
        OutputRow {
            mode: mode.as_str().into(),
            config_hash: hash.into(),
            c_pt: point.init.c_pt(),
            lambda_pt: point.init.lambda_pt(),
            gamma_ft: point.init.gamma_ft(),
            rho_pt,
            rho_sh,
            rho_new,
            alpha: rec.alpha,
            seed: rec.seed,
            mse: rec.mse,
            mse_se_db: rec.mse_se_db,
            residual: rec.residual,
            branch: rec.branch,
            branch_mismatch_db: rec.branch_mismatch_db,
            converged: rec.converged,
            wall_ms,
        }
    }

    /// Equality of everything except the wall-clock column, bit for bit.
    pub fn same_result(&self, other: &OutputRow) -> bool {
        let b = |x: f64, y: f64| x.to_bits() == y.to_bits();
        self.mode == other.mode
            && self.config_hash == other.config_hash
            && b(self.c_pt, other.c_pt)
            && b(self.lambda_pt, other.lambda_pt)
            && b(self.gamma_ft, other.gamma_ft)
            && b(self.rho_pt, other.rho_pt)
            && b(self.rho_sh, other.rho_sh)
            && b(self.rho_new, other.rho_new)
            && b(self.alpha, other.alpha)
            && self.seed == other.seed
            && b(self.mse, other.mse)
            && b(self.mse_se_db, other.mse_se_db)
            && b(self.residual, other.residual)
            && self.branch == other.branch
            && b(self.branch_mismatch_db, other.branch_mismatch_db)
            && self.converged == other.converged
    }
}

/// A generic table for the modes whose rows are not curve records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkInfo {
    pub point: usize,
    pub chunk: usize,
    pub alpha_first: f64,
    pub alpha_last: f64,
    pub len: usize,
}

/// A unit that produced an unreliable or missing result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFlag {
    pub point: usize,
    pub alpha: f64,
    pub seed: u64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub tool: String,
    pub mode: Mode,
    pub name: String,
    pub config_hash: String,
    /// Canonical text of the resolved config; re-running it reproduces the rows.
    pub config: String,
    pub deterministic: bool,
    pub workers: usize,
    pub points: Vec<ConfigPoint>,
    pub chunks: Vec<ChunkInfo>,
    pub flags: Vec<RunFlag>,
    #[serde(default)]
    pub summary: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunTable {
    Curve(Vec<OutputRow>),
    Other(Table),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub table: RunTable,
    pub metadata: Metadata,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub fn write_curve_csv(path: &Path, rows: &[OutputRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    if rows.is_empty() {
        w.write_record(CURVE_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<OutputRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    if header != CURVE_HEADER {
        return Err(Error::Io(format!("{} is not a curve file (header {:?})", path.display(), header)));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

pub fn write_table_csv(path: &Path, table: &Table) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(&table.header).map_err(csv_err)?;
    for row in &table.rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// `results.csv` -> `results.json`.
pub fn metadata_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("json")
}

pub fn write_output(csv_path: &Path, out: &RunOutput) -> Result<()> {
    if let Some(dir) = csv_path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    match &out.table {
        RunTable::Curve(rows) => write_curve_csv(csv_path, rows)?,
        RunTable::Other(t) => write_table_csv(csv_path, t)?,
    }
    let json = serde_json::to_string_pretty(&out.metadata).map_err(|e| Error::Internal(e.to_string()))?;
    std::fs::write(metadata_path(csv_path), json)?;
    Ok(())
}

pub fn read_metadata(path: &Path) -> Result<Metadata> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Shortest text that parses back to the same `f64`.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:?}")
}
