//! wasm-bindgen entry points for `www/index.html`.
//!
//! Every function returns a flat `Float64Array`; the layout is given in its
//! doc comment. Errors surface as JS exceptions carrying the message.

use ptft_core::penalty::{phase_portrait, q_deriv1, q_penalty, GridAxis, InitField, InitParams, Penalty, PortraitCell};
use ptft_core::prox::prox;
use ptft_core::replica::{mixture_from_experiment, solve_curve, SolverConfig};
use ptft_core::task::TaskSpec;
use wasm_bindgen::prelude::*;

fn js(e: ptft_core::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// `n` rows of `[z, q_k(z), q_k'(z), prox(z; k, theta)]` for `z` in `[-zmax, zmax]`.
#[wasm_bindgen]
pub fn penalty_curves(k: f64, theta: f64, zmax: f64, n: usize) -> Result<Vec<f64>, JsValue> {
    let pen = Penalty::Qk { k };
    let mut out = Vec::with_capacity(4 * n);
    for z in linspace(-zmax, zmax, n) {
        out.push(z);
        out.push(q_penalty(z, k).map_err(js)?);
        out.push(q_deriv1(z, k).map_err(js)?);
        out.push(prox(z, &pen, theta).map_err(js)?.beta_hat);
    }
    Ok(out)
}

/// Regime metrics over `c_pt` (log axis, rows) and `lambda_pt` (columns).
/// Row-major cells of `[ell_order, pd, kappa]`; flagged cells are NaN.
#[wasm_bindgen]
pub fn regime_portrait(
    log10_c_min: f64,
    log10_c_max: f64,
    rows: usize,
    cols: usize,
    gamma_ft: f64,
    beta_pt: f64,
    beta_ft: f64,
) -> Result<Vec<f64>, JsValue> {
    let row_axis = GridAxis::new(
        InitField::CPt,
        linspace(log10_c_min, log10_c_max, rows).into_iter().map(|e| 10f64.powf(e)).collect(),
    );
    let col_axis = GridAxis::new(InitField::LambdaPt, linspace(-0.999, 0.999, cols));
    let base = InitParams::new(1.0, 0.0, gamma_ft).map_err(js)?;
    let p = phase_portrait(&base, &row_axis, &col_axis, beta_pt, beta_ft);
    let mut out = Vec::with_capacity(3 * p.cells.len());
    for cell in &p.cells {
        match cell {
            PortraitCell::Metrics(m) => out.extend([m.ell_order, m.pd, m.kappa]),
            PortraitCell::Flagged(_) => out.extend([f64::NAN; 3]),
        }
    }
    Ok(out)
}

/// Replica prediction on a log-spaced alpha grid: rows of `[alpha, mse, se_db]`.
#[allow(clippy::too_many_arguments)]
#[wasm_bindgen]
pub fn replica_curve(
    c_pt: f64,
    lambda_pt: f64,
    gamma_ft: f64,
    rho_pt: f64,
    rho_sh: f64,
    rho_new: f64,
    count: usize,
    mc_samples: usize,
) -> Result<Vec<f64>, JsValue> {
    let init = InitParams::new(c_pt, lambda_pt, gamma_ft).map_err(js)?;
    let spec = TaskSpec::new(rho_pt, rho_sh, rho_new, 0.0).map_err(js)?;
    let mixture = mixture_from_experiment(&init, &spec).map_err(js)?;
    let cfg = SolverConfig {
        mc_samples,
        batch_count: 20.min(mc_samples.max(2)),
        max_iter: 3000,
        ..SolverConfig::default()
    };
    let (lo, hi) = (0.01f64.ln(), 0.5f64.ln());
    let grid: Vec<f64> = linspace(lo, hi, count.max(2)).into_iter().map(f64::exp).collect();
    let sol = solve_curve(&grid, &mixture, &cfg, 6).map_err(js)?;
    Ok(sol.selected.iter().flat_map(|r| [r.alpha, r.mse, r.mse_se_db]).collect())
}
