//! Scheduling of work units and assembly of their results.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::mpsc;
use std::time::Instant;

use crate::diagnet::{run_ptft, run_single_task, EmpiricalRun};
use crate::error::{Error, Result};
use crate::penalty::{phase_portrait, GridAxis, PortraitCell};
use crate::replica::{mixture_from_experiment, mixture_single_task, solve_curve, Branch, CurveRecord, Mixture};
use crate::ridge::{ridge_risk, ridge_risk_three_term};

use super::config::{ConfigPoint, ExperimentConfig, Mode, TaskKind};
use super::output::{
    fmt_f64, read_curve_csv, ChunkInfo, Metadata, OutputRow, RunFlag, RunOutput, RunTable, Table,
};

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads; 0 uses all cores.
    pub workers: usize,
    /// Single-threaded execution everywhere, for bit-reproducible sums.
    pub deterministic: bool,
    /// Progress lines on stderr.
    pub progress: bool,
}

impl RunOptions {
    /// Reads `PTFT_DETERMINISTIC` from the environment.
    pub fn from_env(workers: usize) -> Self {
        let det = std::env::var("PTFT_DETERMINISTIC").is_ok_and(|v| v == "1");
        RunOptions {
            workers,
            deterministic: det,
            progress: false,
        }
    }

    fn threads(&self) -> usize {
        if self.deterministic {
            1
        } else {
            self.workers
        }
    }
}

/// Contiguous, nearly equal pieces of `0..n`.
pub fn chunk_ranges(n: usize, chunks: usize) -> Vec<Range<usize>> {
    let k = chunks.clamp(1, n.max(1));
    let (base, extra) = (n / k, n % k);
    let mut out = Vec::with_capacity(k);
    let mut start = 0;
    for i in 0..k {
        let len = base + usize::from(i < extra);
        out.push(start..start + len);
        start += len;
    }
    out
}

pub fn point_mixture(point: &ConfigPoint) -> Result<Mixture> {
    match &point.task {
        TaskKind::Ptft(spec) => mixture_from_experiment(&point.init, spec),
        TaskKind::SingleTask { rho, sigma0_sq } => mixture_single_task(&point.init, *rho, *sigma0_sq),
    }
}

pub fn empirical_unit(cfg: &ExperimentConfig, point: &ConfigPoint, alpha: f64, seed: u64) -> Result<EmpiricalRun> {
    match &point.task {
        TaskKind::Ptft(spec) => run_ptft(&point.init, spec, cfg.d, alpha, &cfg.train, seed),
        TaskKind::SingleTask { rho, sigma0_sq } => {
            run_single_task(&point.init, *rho, *sigma0_sq, cfg.d, alpha, &cfg.train, seed)
        }
    }
}

fn failed_record(alpha: f64, seed: u64, branch: Branch) -> CurveRecord {
    CurveRecord {
        alpha,
        mse: f64::NAN,
        mse_se_db: f64::NAN,
        residual: f64::NAN,
        branch,
        branch_mismatch_db: f64::NAN,
        converged: false,
        seed,
    }
}

fn millis(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

/// Runs a replica chunk. Returns the records and an error message if the
/// whole chunk failed.
pub fn replica_unit(
    cfg: &ExperimentConfig,
    point: &ConfigPoint,
    alphas: &[f64],
    seed: u64,
) -> (Vec<CurveRecord>, Option<String>) {
    let res = point_mixture(point).and_then(|m| solve_curve(alphas, &m, &cfg.solver, seed));
    match res {
        Ok(sol) => (sol.selected, None),
        Err(e) => (
            alphas.iter().map(|&a| failed_record(a, seed, Branch::Selected)).collect(),
            Some(e.to_string()),
        ),
    }
}

enum UnitResult {
    Replica { point: usize, chunk: usize, records: Vec<(CurveRecord, f64)>, error: Option<String> },
    Empirical { point: usize, alpha_idx: usize, seed_idx: usize, record: CurveRecord, wall_ms: f64, error: Option<String> },
}

fn pool(opts: &RunOptions) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads())
        .build()
        .map_err(|e| Error::Internal(format!("thread pool: {e}")))
}

/// Runs a validated config. `base_dir` resolves relative input paths of compare mode.
pub fn run(cfg: &ExperimentConfig, opts: &RunOptions, base_dir: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    #[cfg(feature = "matrix")]
    if opts.deterministic {
        faer::set_global_parallelism(faer::Par::Seq);
    }
    let hash = cfg.hash()?;
    let mut meta = Metadata {
        tool: format!("ptft-core {}", env!("CARGO_PKG_VERSION")),
        mode: cfg.mode,
        name: cfg.name.clone(),
        config_hash: hash.clone(),
        config: cfg.to_canonical_toml()?,
        deterministic: opts.deterministic,
        workers: opts.threads(),
        points: Vec::new(),
        chunks: Vec::new(),
        flags: Vec::new(),
        summary: serde_json::Value::Null,
    };
    let table = match cfg.mode {
        Mode::ReplicaCurve | Mode::EmpiricalCurve => {
            let points = cfg.expand_points()?;
            let rows = run_curves(cfg, &points, opts, &hash, &mut meta)?;
            meta.points = points;
            RunTable::Curve(rows)
        }
        Mode::PhasePortrait => {
            let points = cfg.expand_points()?;
            let t = run_portrait(cfg, &points, &hash, &mut meta)?;
            meta.points = points;
            RunTable::Other(t)
        }
        Mode::RidgeCheck => RunTable::Other(run_ridge(cfg, &hash, opts, &mut meta)?),
        Mode::Compare => {
            let c = cfg.compare.as_ref().ok_or_else(|| Error::config("compare", "missing"))?;
            let rep = read_curve_csv(&base_dir.join(&c.replica))?;
            let emp = read_curve_csv(&base_dir.join(&c.empirical))?;
            let cmp = compare_rows(&rep, &emp);
            meta.summary = serde_json::json!({
                "matched": cmp.rows.len(),
                "within_2se": cmp.within,
                "fraction_within_2se": cmp.fraction(),
                "unmatched_replica": cmp.unmatched,
            });
            RunTable::Other(cmp.table())
        }
    };
    Ok(RunOutput { table, metadata: meta })
}

fn run_curves(
    cfg: &ExperimentConfig,
    points: &[ConfigPoint],
    opts: &RunOptions,
    hash: &str,
    meta: &mut Metadata,
) -> Result<Vec<OutputRow>> {
    let alphas = cfg.alpha_grid.resolve()?;
    let ranges = chunk_ranges(alphas.len(), cfg.chunks);
    let (tx, rx) = mpsc::channel::<UnitResult>();
    let total;
    let pool = pool(opts)?;
    if cfg.mode == Mode::ReplicaCurve {
        let seed = cfg.seeds[0];
        for p in points {
            for (ci, r) in ranges.iter().enumerate() {
                meta.chunks.push(ChunkInfo {
                    point: p.index,
                    chunk: ci,
                    alpha_first: alphas[r.start],
                    alpha_last: alphas[r.end - 1],
                    len: r.len(),
                });
            }
        }
        total = points.len() * ranges.len();
        pool.scope(|s| {
            for p in points {
                for (ci, r) in ranges.iter().enumerate() {
                    let tx = tx.clone();
                    let grid = &alphas[r.clone()];
                    s.spawn(move |_| {
                        let t0 = Instant::now();
                        let (recs, error) = replica_unit(cfg, p, grid, seed);
                        let per = millis(t0) / grid.len() as f64;
                        let records = recs.into_iter().map(|r| (r, per)).collect();
                        let _ = tx.send(UnitResult::Replica { point: p.index, chunk: ci, records, error });
                    });
                }
            }
        });
    } else {
        total = points.len() * alphas.len() * cfg.seeds.len();
        pool.scope(|s| {
            for p in points {
                for (ai, &alpha) in alphas.iter().enumerate() {
                    for (si, &seed) in cfg.seeds.iter().enumerate() {
                        let tx = tx.clone();
                        s.spawn(move |_| {
                            let t0 = Instant::now();
                            let (record, error) = match empirical_unit(cfg, p, alpha, seed) {
                                Ok(run) => (run.record, None),
                                Err(e) => (failed_record(alpha, seed, Branch::Empirical), Some(e.to_string())),
                            };
                            let _ = tx.send(UnitResult::Empirical {
                                point: p.index,
                                alpha_idx: ai,
                                seed_idx: si,
                                record,
                                wall_ms: millis(t0),
                                error,
                            });
                        });
                    }
                }
            }
        });
    }
    drop(tx);
    // Single writer: results arrive in any order and are keyed for sorting.
    let mut keyed: BTreeMap<(usize, usize, usize), (CurveRecord, f64)> = BTreeMap::new();
    let mut done = 0;
    for unit in rx {
        done += 1;
        match unit {
            UnitResult::Replica { point, chunk, records, error } => {
                let start = ranges[chunk].start;
                if let Some(msg) = error {
                    meta.flags.push(RunFlag { point, alpha: alphas[start], seed: cfg.seeds[0], message: msg });
                }
                for (j, (rec, ms)) in records.into_iter().enumerate() {
                    keyed.insert((point, start + j, 0), (rec, ms));
                }
            }
            UnitResult::Empirical { point, alpha_idx, seed_idx, record, wall_ms, error } => {
                if let Some(msg) = error {
                    meta.flags.push(RunFlag { point, alpha: record.alpha, seed: record.seed, message: msg });
                }
                keyed.insert((point, alpha_idx, seed_idx), (record, wall_ms));
            }
        }
        if opts.progress {
            eprint!("\r{done}/{total} units");
        }
    }
    if opts.progress {
        eprintln!();
    }
    if done != total {
        return Err(Error::Internal(format!("{done} of {total} work units reported back")));
    }
    for ((point, _, _), (rec, _)) in &keyed {
        if !rec.converged && !meta.flags.iter().any(|f| f.point == *point && f.alpha == rec.alpha && f.seed == rec.seed) {
            meta.flags.push(RunFlag { point: *point, alpha: rec.alpha, seed: rec.seed, message: "not converged".into() });
        }
    }
    meta.flags.sort_by(|a, b| (a.point, a.alpha, a.seed).partial_cmp(&(b.point, b.alpha, b.seed)).unwrap_or(std::cmp::Ordering::Equal));
    Ok(keyed
        .into_iter()
        .map(|((p, _, _), (rec, ms))| OutputRow::new(cfg.mode, hash, &points[p], &rec, ms))
        .collect())
}

fn run_portrait(cfg: &ExperimentConfig, points: &[ConfigPoint], hash: &str, meta: &mut Metadata) -> Result<Table> {
    let p = cfg.portrait.as_ref().ok_or_else(|| Error::config("portrait", "missing"))?;
    let rows = GridAxis::new(p.rows.field, p.rows.resolve("rows")?);
    let cols = GridAxis::new(p.cols.field, p.cols.resolve("cols")?);
    let mut table = Table {
        header: [
            "mode", "config_hash", "point", "row_field", "row_value", "col_field", "col_value", "beta_pt", "beta_ft",
            "ell_order", "pd", "kappa", "flag",
        ]
        .map(String::from)
        .to_vec(),
        rows: Vec::new(),
    };
    let mut flagged = 0;
    for pt in points {
        let portrait = phase_portrait(&pt.init, &rows, &cols, p.beta_pt, p.beta_ft);
        for (i, &rv) in rows.values.iter().enumerate() {
            for (j, &cv) in cols.values.iter().enumerate() {
                let (m, flag) = match portrait.cell(i, j) {
                    PortraitCell::Metrics(m) => ([m.ell_order, m.pd, m.kappa], String::new()),
                    PortraitCell::Flagged(msg) => {
                        flagged += 1;
                        ([f64::NAN; 3], msg.clone())
                    }
                };
                table.rows.push(vec![
                    Mode::PhasePortrait.as_str().into(),
                    hash.into(),
                    pt.index.to_string(),
                    rows.field.name().into(),
                    fmt_f64(rv),
                    cols.field.name().into(),
                    fmt_f64(cv),
                    fmt_f64(p.beta_pt),
                    fmt_f64(p.beta_ft),
                    fmt_f64(m[0]),
                    fmt_f64(m[1]),
                    fmt_f64(m[2]),
                    flag,
                ]);
            }
        }
    }
    meta.summary = serde_json::json!({ "cells": table.rows.len(), "flagged": flagged });
    Ok(table)
}

#[cfg(feature = "matrix")]
fn ridge_mc(model: &crate::ridge::RidgeModel, n: usize, trials: usize, seed: u64, opts: &RunOptions) -> Result<crate::ridge::RidgeMc> {
    pool(opts)?.install(|| crate::ridge::simulate(model, n, trials, seed))
}

#[cfg(not(feature = "matrix"))]
fn ridge_mc(_: &crate::ridge::RidgeModel, _: usize, _: usize, _: u64, _: &RunOptions) -> Result<crate::ridge::RidgeMc> {
    Err(Error::config("mode", "ridge-check needs the `matrix` feature"))
}

fn run_ridge(cfg: &ExperimentConfig, hash: &str, opts: &RunOptions, meta: &mut Metadata) -> Result<Table> {
    let r = cfg.ridge.as_ref().ok_or_else(|| Error::config("ridge", "missing"))?;
    let model = r.model();
    let risk = ridge_risk(&model)?;
    let three = ridge_risk_three_term(&model)?;
    let seed = cfg.seeds.first().copied().unwrap_or(0);
    let mc = ridge_mc(&model, r.n, r.trials, seed, opts)?;
    let z = (mc.mean - risk) / mc.se;
    meta.summary = serde_json::json!({ "risk": risk, "mc_mean": mc.mean, "mc_se": mc.se, "z": z });
    Ok(Table {
        header: [
            "mode", "config_hash", "gamma_aspect", "lambda_reg", "sigma0_sq", "n", "trials", "seed", "risk",
            "risk_three_term", "mc_mean", "mc_se", "z", "within_2se",
        ]
        .map(String::from)
        .to_vec(),
        rows: vec![vec![
            Mode::RidgeCheck.as_str().into(),
            hash.into(),
            fmt_f64(r.gamma_aspect),
            fmt_f64(r.lambda_reg),
            fmt_f64(r.sigma0_sq),
            r.n.to_string(),
            r.trials.to_string(),
            seed.to_string(),
            fmt_f64(risk),
            fmt_f64(three),
            fmt_f64(mc.mean),
            fmt_f64(mc.se),
            fmt_f64(z),
            (z.abs() <= 2.0).to_string(),
        ]],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub replica: OutputRow,
    pub empirical_mean: f64,
    pub empirical_se: f64,
    pub seeds: usize,
    /// `(empirical_mean - replica_mse) / combined_se`.
    pub z: f64,
}

impl CompareRow {
    pub fn within(&self, k: f64) -> bool {
        self.z.abs() <= k
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Comparison {
    pub rows: Vec<CompareRow>,
    pub within: usize,
    pub unmatched: usize,
}

impl Comparison {
    pub fn fraction(&self) -> f64 {
        if self.rows.is_empty() {
            0.0
        } else {
            self.within as f64 / self.rows.len() as f64
        }
    }

    pub fn table(&self) -> Table {
        let header = [
            "c_pt", "lambda_pt", "gamma_ft", "rho_pt", "rho_sh", "rho_new", "alpha", "replica_mse", "replica_se",
            "empirical_mean", "empirical_se", "seeds", "z", "within_2se",
        ]
        .map(String::from)
        .to_vec();
        let rows = self
            .rows
            .iter()
            .map(|c| {
                let r = &c.replica;
                vec![
                    fmt_f64(r.c_pt),
                    fmt_f64(r.lambda_pt),
                    fmt_f64(r.gamma_ft),
                    fmt_f64(r.rho_pt),
                    fmt_f64(r.rho_sh),
                    fmt_f64(r.rho_new),
                    fmt_f64(r.alpha),
                    fmt_f64(r.mse),
                    fmt_f64(replica_se(r)),
                    fmt_f64(c.empirical_mean),
                    fmt_f64(c.empirical_se),
                    c.seeds.to_string(),
                    fmt_f64(c.z),
                    c.within(2.0).to_string(),
                ]
            })
            .collect();
        Table { header, rows }
    }
}

/// Absolute MC standard error recovered from the dB column.
pub fn replica_se(r: &OutputRow) -> f64 {
    if r.mse_se_db.is_finite() {
        r.mse_se_db * std::f64::consts::LN_10 / 10.0 * r.mse
    } else {
        0.0
    }
}

type JoinKey = [u64; 7];

fn join_key(r: &OutputRow) -> JoinKey {
    [r.c_pt, r.lambda_pt, r.gamma_ft, r.rho_pt, r.rho_sh, r.rho_new, r.alpha].map(|x| {
        // All NaNs collapse to one key so single-task rows join.
        if x.is_nan() {
            f64::NAN.to_bits()
        } else {
            x.to_bits()
        }
    })
}

/// Joins replica rows with empirical seed means on (parameters, alpha). The
/// combined SE adds the replica MC error and the across-seed standard error.
pub fn compare_rows(replica: &[OutputRow], empirical: &[OutputRow]) -> Comparison {
    let mut groups: BTreeMap<JoinKey, Vec<f64>> = BTreeMap::new();
    for e in empirical {
        groups.entry(join_key(e)).or_default().push(e.mse);
    }
    let mut rows = Vec::new();
    let mut unmatched = 0;
    for r in replica {
        let Some(vals) = groups.get(&join_key(r)) else {
            unmatched += 1;
            continue;
        };
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let se = if vals.len() > 1 {
            (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0) / n).sqrt()
        } else {
            f64::NAN
        };
        let comb = (se * se + replica_se(r).powi(2)).sqrt();
        let z = if comb > 0.0 { (mean - r.mse) / comb } else if mean == r.mse { 0.0 } else { f64::INFINITY };
        rows.push(CompareRow {
            replica: r.clone(),
            empirical_mean: mean,
            empirical_se: se,
            seeds: vals.len(),
            z,
        });
    }
    let within = rows.iter().filter(|c| c.within(2.0)).count();
    Comparison { rows, within, unmatched }
}

/// Re-runs the unit that produced `row` under `cfg` and returns its fresh row.
/// Replica rows re-run their whole chunk, since continuation within a chunk
/// decides the warm starts.
pub fn reproduce_row(cfg: &ExperimentConfig, row: &OutputRow) -> Result<OutputRow> {
    if cfg.hash()? != row.config_hash {
        return Err(Error::config("config_hash", format!("row was produced by {}, config hashes to {}", row.config_hash, cfg.hash()?)));
    }
    let points = cfg.expand_points()?;
    let point = points
        .iter()
        .find(|p| p.matches(row.c_pt, row.lambda_pt, row.gamma_ft, (row.rho_pt, row.rho_sh, row.rho_new)))
        .ok_or_else(|| Error::config("points", "no config point matches the row"))?;
    let alphas = cfg.alpha_grid.resolve()?;
    let ai = alphas
        .iter()
        .position(|a| a.to_bits() == row.alpha.to_bits())
        .ok_or_else(|| Error::config("alpha_grid", format!("alpha {} is not on the grid", row.alpha)))?;
    let hash = cfg.hash()?;
    let t0 = Instant::now();
    let rec = match cfg.mode {
        Mode::ReplicaCurve => {
            let r = chunk_ranges(alphas.len(), cfg.chunks)
                .into_iter()
                .find(|r| r.contains(&ai))
                .ok_or_else(|| Error::Internal("alpha outside every chunk".into()))?;
            let (recs, _) = replica_unit(cfg, point, &alphas[r.clone()], row.seed);
            recs[ai - r.start]
        }
        Mode::EmpiricalCurve => match empirical_unit(cfg, point, row.alpha, row.seed) {
            Ok(run) => run.record,
            Err(_) => failed_record(row.alpha, row.seed, Branch::Empirical),
        },
        m => return Err(Error::config("mode", format!("{} rows are not curve records", m.as_str()))),
    };
    Ok(OutputRow::new(cfg.mode, &hash, point, &rec, millis(t0)))
}
