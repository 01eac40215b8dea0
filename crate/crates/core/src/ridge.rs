//! Deterministic equivalent for ridge regression with a coordinate-dependent
//! penalty `lambda * sum_j mu_j b_j^2`, plus the finite-size matrix Monte-Carlo
//! it is checked against.
//!
//! Design: `X` is `n x m` with i.i.d. `N(0, 1/n)` entries and `m / n -> gamma`.
//! The estimator is `(X^T X + lambda M)^-1 X^T y` and the risk is the
//! per-coordinate squared error averaged over the `m` coordinates.

#[cfg(feature = "matrix")]
use faer::prelude::*;
#[cfg(feature = "matrix")]
use faer::{Mat, Side};
#[cfg(feature = "matrix")]
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
#[cfg(feature = "matrix")]
use crate::rng::{keyed_stream, Purpose};

const RESIDUAL_TOL: f64 = 1e-12;

/// One atom of the law of `mu`, with the conditional signal power `q = E[beta^2 | mu]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeAtom {
    pub mu: f64,
    pub prob: f64,
    pub q: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub atoms: Vec<RidgeAtom>,
    /// Aspect ratio `m / n`.
    pub gamma_aspect: f64,
    pub lambda_reg: f64,
    pub sigma0_sq: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeFixedPoint {
    pub t_tilde: f64,
    pub t_tilde_prime: f64,
    /// `t^-2 - gamma E[1/(mu+t)^2]`; positive on the stable branch.
    pub margin: f64,
    pub residual: f64,
}

impl RidgeModel {
    pub fn validate(&self) -> Result<()> {
        if self.atoms.is_empty() {
            return Err(Error::domain("ridge", "mu law has no atoms"));
        }
        let mut total = 0.0;
        for a in &self.atoms {
            if !(a.mu.is_finite() && a.mu > 0.0) {
                return Err(Error::domain("ridge", format!("mu atoms must be > 0, got {}", a.mu)));
            }
            if !(a.prob.is_finite() && a.prob >= 0.0) {
                return Err(Error::domain("ridge", format!("atom probability {} is invalid", a.prob)));
            }
            if !(a.q.is_finite() && a.q >= 0.0) {
                return Err(Error::domain("ridge", format!("q must be >= 0, got {}", a.q)));
            }
            total += a.prob;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain("ridge", format!("atom probabilities sum to {total}")));
        }
        if !(self.gamma_aspect.is_finite() && self.gamma_aspect > 0.0) {
            return Err(Error::domain("ridge", "gamma_aspect must be > 0"));
        }
        if !(self.lambda_reg.is_finite() && self.lambda_reg > 0.0) {
            return Err(Error::domain("ridge", "lambda_reg must be > 0"));
        }
        if !(self.sigma0_sq.is_finite() && self.sigma0_sq >= 0.0) {
            return Err(Error::domain("ridge", "sigma0_sq must be >= 0"));
        }
        Ok(())
    }

    /// `E[f(atom)]` as an exact finite sum.
    fn expect(&self, f: impl Fn(&RidgeAtom) -> f64) -> f64 {
        self.atoms.iter().map(|a| a.prob * f(a)).sum()
    }

    /// Prior signal power `E[q(mu)]`.
    pub fn signal_power(&self) -> f64 {
        self.expect(|a| a.q)
    }

    /// `f(t) = t (lambda + gamma E[1/(mu+t)]) - 1`, increasing in `t`.
    fn residual(&self, t: f64) -> f64 {
        t * (self.lambda_reg + self.gamma_aspect * self.expect(|a| 1.0 / (a.mu + t))) - 1.0
    }
}

/// Positive root of `t (lambda + gamma E[1/(mu+t)]) = 1`.
///
/// `f` is increasing with `f(0) = -1` and `f(1/lambda) > 0`, so bisection on
/// `[0, 1/lambda]` brackets the unique root; a few Newton steps then polish it.
pub fn solve_t(model: &RidgeModel) -> Result<RidgeFixedPoint> {
    model.validate()?;
    let (mut lo, mut hi) = (0.0f64, 1.0 / model.lambda_reg);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if model.residual(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
        if (hi - lo) <= 1e-15 * hi {
            break;
        }
    }
    let mut t = 0.5 * (lo + hi);
    for _ in 0..8 {
        let f = model.residual(t);
        if f.abs() <= 1e-15 {
            break;
        }
        let df = model.lambda_reg + model.gamma_aspect * model.expect(|a| a.mu / (a.mu + t).powi(2));
        let next = t - f / df;
        if !(next > lo && next < hi) || model.residual(next).abs() >= f.abs() {
            break;
        }
        t = next;
    }
    let residual = model.residual(t).abs();
    if residual > RESIDUAL_TOL {
        return Err(Error::Internal(format!("ridge fixed point residual {residual:e}")));
    }
    let r = model.gamma_aspect * model.expect(|a| 1.0 / (a.mu + t).powi(2));
    let margin = t.powi(-2) - r;
    if !(margin > 0.0) {
        return Err(Error::UnstableBranch { margin });
    }
    Ok(RidgeFixedPoint {
        t_tilde: t,
        t_tilde_prime: 1.0 / margin,
        margin,
        residual,
    })
}

/// Asymptotic per-coordinate error `E ||beta_hat - beta||^2 / m`.
///
/// The signal part is `(t'/t^2) E[q mu^2/(mu+t)^2]`, obtained from the second
/// derivative of the resolvent in the rescaled coordinates. The three-term
/// expression in [`ridge_risk_three_term`] drops the `M^-1` between the two
/// resolvent factors and disagrees with simulation once `mu` is not constant.
pub fn ridge_risk(model: &RidgeModel) -> Result<f64> {
    let fp = solve_t(model)?;
    let (t, tp) = (fp.t_tilde, fp.t_tilde_prime);
    let signal = tp / (t * t) * model.expect(|a| a.q * (a.mu / (a.mu + t)).powi(2));
    let risk = signal + variance_term(model, &fp);
    if !(risk >= 0.0) {
        return Err(Error::Internal(format!("negative ridge risk {risk}")));
    }
    Ok(risk)
}

/// `E[q mu/(mu+t)] - lambda t' E[q mu/(mu+t)^2] + sigma^2 t' E[1/(mu+t)^2]`.
/// Exact when `mu` is constant; kept for comparison.
pub fn ridge_risk_three_term(model: &RidgeModel) -> Result<f64> {
    let fp = solve_t(model)?;
    let (t, tp) = (fp.t_tilde, fp.t_tilde_prime);
    let a = model.expect(|a| a.q * a.mu / (a.mu + t));
    let b = model.expect(|a| a.q * a.mu / (a.mu + t).powi(2));
    Ok(a - model.lambda_reg * tp * b + variance_term(model, &fp))
}

/// Noise contribution `sigma^2 t' E[1/(mu+t)^2]`.
pub fn variance_term(model: &RidgeModel, fp: &RidgeFixedPoint) -> f64 {
    model.sigma0_sq * fp.t_tilde_prime * model.expect(|a| 1.0 / (a.mu + fp.t_tilde).powi(2))
}

/// Noise contribution through `Tr(G)/m - lambda Tr(M G^2)/m`, with the
/// diagonal resolvent entries replaced by `t_j(z) = 1/(-z (1 + t(z)/mu_j))`
/// and its `z`-derivative, both evaluated at `z = -lambda`.
pub fn variance_term_decomposed(model: &RidgeModel, fp: &RidgeFixedPoint) -> f64 {
    let lam = model.lambda_reg;
    let (t, tp) = (fp.t_tilde, fp.t_tilde_prime);
    let trace_g = model.expect(|a| {
        let h = lam * (1.0 + t / a.mu);
        (1.0 / h) / a.mu
    });
    let trace_mg2 = model.expect(|a| {
        // h(z) = -z (1 + t(z)/mu); dh/dz = -(1 + t/mu) - z t'/mu.
        let h = lam * (1.0 + t / a.mu);
        let dh = -(1.0 + t / a.mu) + lam * tp / a.mu;
        (-dh / (h * h)) / a.mu
    });
    model.sigma0_sq * (trace_g - lam * trace_mg2)
}

/// Mean and standard error of the finite-size error over independent trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RidgeMc {
    pub mean: f64,
    pub se: f64,
    pub trials: usize,
}

/// Number of coordinates given to each atom: `round(prob * m)`, with the
/// rounding surplus settled by largest remainder so the counts sum to `m`.
pub fn atom_counts(model: &RidgeModel, m: usize) -> Vec<usize> {
    let raw: Vec<f64> = model.atoms.iter().map(|a| a.prob * m as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
    let mut left = m - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..raw.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

#[cfg(feature = "matrix")]
/// One draw of `||beta_hat - beta||^2 / m` with `m = round(gamma n)`.
pub fn simulate_once(model: &RidgeModel, n: usize, seed: u64, trial: u64) -> Result<f64> {
    model.validate()?;
    let m = (model.gamma_aspect * n as f64).round() as usize;
    if n == 0 || m == 0 {
        return Err(Error::domain("ridge simulate", "n and round(gamma n) must be >= 1"));
    }
    let mut rng = keyed_stream(seed, Purpose::Ridge, trial);
    let counts = atom_counts(model, m);
    let mut mu = Vec::with_capacity(m);
    let mut beta = Vec::with_capacity(m);
    for (atom, &c) in model.atoms.iter().zip(&counts) {
        for _ in 0..c {
            let z: f64 = StandardNormal.sample(&mut rng);
            mu.push(atom.mu);
            beta.push(atom.q.sqrt() * z);
        }
    }
    let scale = 1.0 / (n as f64).sqrt();
    // Column-major fill keeps the draw order independent of faer's layout.
    let mut x = Mat::<f64>::zeros(n, m);
    for j in 0..m {
        for i in 0..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            x[(i, j)] = scale * z;
        }
    }
    let sigma = model.sigma0_sq.sqrt();
    let b = Mat::<f64>::from_fn(m, 1, |j, _| beta[j]);
    let mut y: Mat<f64> = &x * &b;
    for i in 0..n {
        let z: f64 = StandardNormal.sample(&mut rng);
        y[(i, 0)] += sigma * z;
    }

    let mut gram: Mat<f64> = x.transpose() * &x;
    for j in 0..m {
        gram[(j, j)] += model.lambda_reg * mu[j];
    }
    let mut rhs: Mat<f64> = x.transpose() * &y;
    let llt = gram
        .llt(Side::Lower)
        .map_err(|e| Error::Internal(format!("ridge Cholesky failed: {e:?}")))?;
    llt.solve_in_place(rhs.as_mut());
    let err = (0..m).map(|j| (rhs[(j, 0)] - beta[j]).powi(2)).sum::<f64>() / m as f64;
    Ok(err)
}

#[cfg(feature = "matrix")]
/// Averages [`simulate_once`] over `trials` independent design draws.
pub fn simulate(model: &RidgeModel, n: usize, trials: usize, seed: u64) -> Result<RidgeMc> {
    if trials < 2 {
        return Err(Error::domain("ridge simulate", "need at least two trials for an SE"));
    }
    let errs = (0..trials as u64)
        .map(|t| simulate_once(model, n, seed, t))
        .collect::<Result<Vec<_>>>()?;
    let k = trials as f64;
    let mean = errs.iter().sum::<f64>() / k;
    let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (k - 1.0);
    Ok(RidgeMc {
        mean,
        se: (var / k).sqrt(),
        trials,
    })
}
