//! Replica-symmetric prediction of the fine-tuning error.
//!
//! The high-dimensional estimator decouples into the scalar problem
//! `y = beta + sqrt(theta0) eta`, `beta_hat = prox(y; q_k, theta)`, closed by
//!
//! ```text
//! theta0 = (sigma0^2 + p) / alpha,   p   = E[(beta - beta_hat)^2]
//! theta  = (lambda_ext + chi) / alpha, chi = theta * E[d beta_hat / dy]
//! ```
//!
//! Expectations are Monte-Carlo averages over a sample bank that is frozen
//! for one `alpha` (common random numbers), so the damped iteration on
//! `(theta0, theta)` is a deterministic map.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::penalty::{k_law, InitParams, Penalty};
use crate::prox::prox_from;
use crate::rng::{derive, keyed_stream, Purpose};
use crate::task::{group_mixture, BetaLaw, TaskSpec};

/// One coordinate group of the scalar problem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub pi: f64,
    pub beta_ft: BetaLaw,
    pub penalty: Penalty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mixture {
    pub components: Vec<MixtureComponent>,
    pub sigma0_sq: f64,
}

impl Mixture {
    pub fn new(components: Vec<MixtureComponent>, sigma0_sq: f64) -> Result<Self> {
        let m = Mixture {
            components: components.into_iter().filter(|c| c.pi > 0.0).collect(),
            sigma0_sq,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::domain("Mixture", "no component with positive weight"));
        }
        let total: f64 = self.components.iter().map(|c| c.pi).sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::domain("Mixture", format!("weights sum to {total}, expected 1")));
        }
        for c in &self.components {
            if !(0.0..=1.0).contains(&c.pi) {
                return Err(Error::domain("Mixture", format!("weight {} outside [0, 1]", c.pi)));
            }
            c.penalty.validate()?;
        }
        if !(self.sigma0_sq.is_finite() && self.sigma0_sq >= 0.0) {
            return Err(Error::domain("Mixture", "sigma0_sq must be >= 0"));
        }
        Ok(())
    }

    /// `E[beta_ft^2]`, the error of the zero estimator.
    pub fn signal_power(&self) -> f64 {
        self.components
            .iter()
            .map(|c| c.pi * c.beta_ft.second_moment())
            .sum()
    }

    /// Number of distinct penalties.
    pub fn distinct_penalties(&self) -> usize {
        let mut seen: Vec<Penalty> = Vec::new();
        for c in &self.components {
            if !seen.contains(&c.penalty) {
                seen.push(c.penalty);
            }
        }
        seen.len()
    }
}

/// Penalty mixture of the fine-tuning stage: PT-inactive groups get
/// `k_law(init, 0)`, PT-active groups `k_law(init, a_pt / sqrt(rho_pt))`.
pub fn mixture_from_experiment(init: &InitParams, spec: &TaskSpec) -> Result<Mixture> {
    let k_off = k_law(init, 0.0)?;
    let k_on = k_law(init, spec.beta_pt_magnitude())?;
    let comps = group_mixture(spec)
        .into_iter()
        .map(|g| MixtureComponent {
            pi: g.pi,
            beta_ft: g.beta_ft,
            penalty: Penalty::Qk {
                k: if g.theta_pt { k_on } else { k_off },
            },
        })
        .collect();
    Mixture::new(comps, spec.sigma0_sq())
}

/// Mixture for training one sparse sign task from the homogeneous
/// initialization, where `k = 4 c^2` on every coordinate.
pub fn mixture_single_task(init: &InitParams, rho: f64, sigma0_sq: f64) -> Result<Mixture> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::domain("mixture_single_task", format!("rho must lie in (0, 1], got {rho}")));
    }
    let k = 4.0 * init.c_pt() * init.c_pt();
    let penalty = Penalty::Qk { k };
    Mixture::new(
        vec![
            MixtureComponent {
                pi: 1.0 - rho,
                beta_ft: BetaLaw::Zero,
                penalty,
            },
            MixtureComponent {
                pi: rho,
                beta_ft: BetaLaw::Sign {
                    magnitude: 1.0 / rho.sqrt(),
                },
                penalty,
            },
        ],
        sigma0_sq,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    Iid,
    /// Independent Latin-hypercube replicates, one per batch.
    Lhs,
}

/// How the `m` Monte-Carlo samples are split across groups. The estimator
/// always weights group means by the true `pi_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Allocation {
    /// `m_j = round(pi_j m)`.
    Proportional,
    /// `m_j` proportional to `pi_j (E_j[beta^2] + E[beta^2])`, a Neyman
    /// allocation with the group's signal power standing in for its spread.
    Signal,
    /// `m_j` proportional to `pi_j sigma_j`, where `sigma_j` is the spread of
    /// the squared error in group `j` measured by a quarter-size pilot solve at
    /// the same `alpha`. A fifth of the budget keeps the `Signal` split so that
    /// no group is starved by a noisy pilot.
    Pilot,
}

/// Share of the samples placed by the `Signal` rule under `Pilot`.
const PILOT_DEFENSIVE: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub mc_samples: usize,
    pub damping: f64,
    pub tol: f64,
    /// Relative change required on top of `tol`, so that tiny iterates are
    /// not declared converged long before they settle.
    pub rel_tol: f64,
    pub max_iter: usize,
    pub lambda_ext: f64,
    pub g_min: f64,
    pub mse_floor: f64,
    pub batch_count: usize,
    pub sampling: Sampling,
    pub allocation: Allocation,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            mc_samples: 80_000,
            damping: 0.25,
            tol: 1e-6,
            rel_tol: 1e-4,
            max_iter: 900,
            lambda_ext: 1e-6,
            g_min: 1e-14,
            mse_floor: 1e-12,
            batch_count: 100,
            sampling: Sampling::Lhs,
            allocation: Allocation::Pilot,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::config(format!("solver.{name}"), format!("must be > 0, got {v}")))
            }
        };
        pos("tol", self.tol)?;
        pos("rel_tol", self.rel_tol)?;
        pos("g_min", self.g_min)?;
        pos("mse_floor", self.mse_floor)?;
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::config("solver.damping", format!("must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.lambda_ext.is_finite() && self.lambda_ext >= 0.0) {
            return Err(Error::config("solver.lambda_ext", "must be >= 0"));
        }
        if self.max_iter == 0 {
            return Err(Error::config("solver.max_iter", "must be >= 1"));
        }
        if self.batch_count < 2 {
            return Err(Error::config("solver.batch_count", "must be >= 2"));
        }
        if self.mc_samples < self.batch_count {
            return Err(Error::config("solver.mc_samples", "must be at least batch_count"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReplicaState {
    pub p: f64,
    pub chi: f64,
    pub theta: f64,
    pub theta0: f64,
    pub residual: f64,
}

/// Monte-Carlo moments at one `(theta0, theta)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub p_hat: f64,
    pub p_se: f64,
    pub dy_mean: f64,
    pub dy_se: f64,
    pub chi_hat: f64,
    /// `E[(beta_hat - beta) eta] / sqrt(theta0)`, which equals `E[dy]` by Stein's lemma.
    pub stein: f64,
    pub stein_se: f64,
}

struct Stratum {
    pi: f64,
    penalty: Penalty,
    beta: Vec<f64>,
    eta: Vec<f64>,
    guess: Vec<f64>,
    /// Start offsets of the batches, plus the end.
    batches: Vec<usize>,
}

/// Frozen samples for one `alpha`.
pub struct McBank {
    strata: Vec<Stratum>,
    batch_count: usize,
}

fn allocate(weights: &[f64], m: usize, min_each: usize) -> Vec<usize> {
    // Largest-remainder rounding of pi_j * m; every group gets at least one sample per batch.
    let raw: Vec<f64> = weights.iter().map(|w| w * m as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut left = m.saturating_sub(out.iter().sum());
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &j in &order {
        if left == 0 {
            break;
        }
        out[j] += 1;
        left -= 1;
    }
    out.iter_mut().for_each(|c| *c = (*c).max(min_each));
    out
}

fn stratified_normals<R: Rng>(rng: &mut R, n: usize, normal: &Normal) -> Vec<f64> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    perm.into_iter()
        .map(|p| {
            let u = (p as f64 + rng.random::<f64>()) / n as f64;
            normal.inverse_cdf(u.clamp(1e-300, 1.0 - f64::EPSILON))
        })
        .collect()
}

impl McBank {
    /// Bank with the fixed split of `cfg.allocation`; `Pilot` falls back to
    /// `Signal` here, see [`allocation_weights`].
    pub fn new(mixture: &Mixture, cfg: &SolverConfig, seed: u64, key: u64) -> Result<Self> {
        Self::with_weights(mixture, cfg, seed, key, &static_weights(mixture, cfg.allocation))
    }

    /// Bank with `m_j` proportional to `weights[j]`.
    pub fn with_weights(mixture: &Mixture, cfg: &SolverConfig, seed: u64, key: u64, weights: &[f64]) -> Result<Self> {
        mixture.validate()?;
        cfg.validate()?;
        if weights.len() != mixture.components.len() || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::domain("McBank", "need one finite nonnegative weight per group"));
        }
        let normal = Normal::standard();
        let b = cfg.batch_count;
        let counts = allocate(weights, cfg.mc_samples, b);
        let mut strata = Vec::with_capacity(counts.len());
        for (j, (comp, &mj)) in mixture.components.iter().zip(&counts).enumerate() {
            let mut rng = keyed_stream(derive(seed, j as u64), Purpose::MonteCarlo, key);
            let batches: Vec<usize> = (0..=b).map(|i| i * mj / b).collect();
            let (mut beta, mut eta) = (Vec::with_capacity(mj), Vec::with_capacity(mj));
            for w in batches.windows(2) {
                let n = w[1] - w[0];
                match cfg.sampling {
                    Sampling::Iid => {
                        for _ in 0..n {
                            beta.push(comp.beta_ft.sample(&mut rng));
                            eta.push(rng.sample::<f64, _>(StandardNormal));
                        }
                    }
                    Sampling::Lhs => {
                        eta.extend(stratified_normals(&mut rng, n, &normal));
                        match comp.beta_ft {
                            BetaLaw::Zero => beta.extend(std::iter::repeat_n(0.0, n)),
                            BetaLaw::Gaussian { var } => {
                                let sd = var.sqrt();
                                beta.extend(stratified_normals(&mut rng, n, &normal).into_iter().map(|z| sd * z));
                            }
                            BetaLaw::Sign { magnitude } => {
                                let mut perm: Vec<usize> = (0..n).collect();
                                perm.shuffle(&mut rng);
                                let odd_up: bool = rng.random();
                                beta.extend(perm.into_iter().map(|p| {
                                    let up = 2 * p < n || (2 * p == n - 1 && odd_up);
                                    if up {
                                        magnitude
                                    } else {
                                        -magnitude
                                    }
                                }));
                            }
                        }
                    }
                }
            }
            strata.push(Stratum {
                pi: comp.pi,
                penalty: comp.penalty,
                guess: vec![f64::NAN; mj],
                beta,
                eta,
                batches,
            });
        }
        Ok(McBank { strata, batch_count: b })
    }

    /// Per-group standard deviation of the squared error `(beta_hat - beta)^2`
    /// over individual samples.
    pub fn group_spread(&self, theta0: f64, theta: f64) -> Result<Vec<f64>> {
        let sq = theta0.max(0.0).sqrt();
        self.strata
            .par_iter()
            .map(|s| {
                let n = s.beta.len() as f64;
                let (mut sum, mut sum2) = (0.0f64, 0.0f64);
                for (i, &b) in s.beta.iter().enumerate() {
                    let warm = if s.guess[i].is_nan() { None } else { Some(s.guess[i]) };
                    let e = prox_from(b + sq * s.eta[i], &s.penalty, theta, warm)?.beta_hat - b;
                    sum += e * e;
                    sum2 += e.powi(4);
                }
                let mean = sum / n;
                Ok((sum2 / n - mean * mean).max(0.0).sqrt())
            })
            .collect()
    }

    pub fn sample_count(&self) -> usize {
        self.strata.iter().map(|s| s.beta.len()).sum()
    }

    /// Moment estimates at `(theta0, theta)`. Batches are reduced in a fixed
    /// order, so the result does not depend on the number of worker threads.
    pub fn moments(&mut self, theta0: f64, theta: f64) -> Result<Moments> {
        let sq = theta0.max(0.0).sqrt();
        let b = self.batch_count;
        // per batch: (p, dy, stein) pooled over strata with weights pi_j
        let mut per_batch = vec![[0.0f64; 3]; b];
        for s in &mut self.strata {
            let pen = s.penalty;
            let chunks: Vec<(usize, usize)> = s.batches.windows(2).map(|w| (w[0], w[1])).collect();
            let beta = &s.beta;
            let eta = &s.eta;
            let guesses: Vec<&mut [f64]> = split_by(&mut s.guess, &s.batches);
            let sums: Vec<Result<[f64; 3]>> = chunks
                .par_iter()
                .zip(guesses.into_par_iter())
                .map(|(&(lo, hi), guess)| {
                    let mut acc = [0.0f64; 3];
                    for (i, g) in (lo..hi).zip(guess.iter_mut()) {
                        let y = beta[i] + sq * eta[i];
                        let warm = if g.is_nan() { None } else { Some(*g) };
                        let r = prox_from(y, &pen, theta, warm)?;
                        *g = r.beta_hat;
                        let e = r.beta_hat - beta[i];
                        acc[0] += e * e;
                        acc[1] += r.dy;
                        acc[2] += e * eta[i];
                    }
                    let n = (hi - lo) as f64;
                    Ok([acc[0] / n, acc[1] / n, acc[2] / n])
                })
                .collect();
            for (slot, r) in per_batch.iter_mut().zip(sums) {
                let r = r?;
                for q in 0..3 {
                    slot[q] += s.pi * r[q];
                }
            }
        }
        let stat = |q: usize| {
            let mean = per_batch.iter().map(|v| v[q]).sum::<f64>() / b as f64;
            let var = per_batch.iter().map(|v| (v[q] - mean).powi(2)).sum::<f64>() / (b as f64 - 1.0);
            (mean, (var / b as f64).sqrt())
        };
        let (p_hat, p_se) = stat(0);
        let (dy_mean, dy_se) = stat(1);
        let (stein_raw, stein_raw_se) = stat(2);
        let (stein, stein_se) = if sq > 0.0 {
            (stein_raw / sq, stein_raw_se / sq)
        } else {
            (f64::NAN, f64::NAN)
        };
        Ok(Moments {
            p_hat,
            p_se,
            dy_mean,
            dy_se,
            chi_hat: theta * dy_mean,
            stein,
            stein_se,
        })
    }

    /// Per-stratum sample moments `(pi, penalty, E[beta^2], E[beta eta], E[eta^2])`,
    /// used to build MC-free references for quadratic penalties.
    pub fn sample_second_moments(&self) -> Vec<(f64, Penalty, f64, f64, f64)> {
        self.strata
            .iter()
            .map(|s| {
                let n = s.beta.len() as f64;
                let bb = s.beta.iter().map(|x| x * x).sum::<f64>() / n;
                let be = s.beta.iter().zip(&s.eta).map(|(x, e)| x * e).sum::<f64>() / n;
                let ee = s.eta.iter().map(|e| e * e).sum::<f64>() / n;
                (s.pi, s.penalty, bb, be, ee)
            })
            .collect()
    }
}

fn split_by<'a>(v: &'a mut [f64], bounds: &[usize]) -> Vec<&'a mut [f64]> {
    let mut out = Vec::with_capacity(bounds.len().saturating_sub(1));
    let mut rest = v;
    for w in bounds.windows(2) {
        let (head, tail) = rest.split_at_mut(w[1] - w[0]);
        out.push(head);
        rest = tail;
    }
    out
}

fn static_weights(mixture: &Mixture, allocation: Allocation) -> Vec<f64> {
    let pis = || mixture.components.iter().map(|c| c.pi).collect();
    match allocation {
        Allocation::Proportional => pis(),
        Allocation::Signal | Allocation::Pilot => {
            let power = mixture.signal_power();
            let raw: Vec<f64> = mixture
                .components
                .iter()
                .map(|c| c.pi * (c.beta_ft.second_moment() + power))
                .collect();
            let total: f64 = raw.iter().sum();
            if total > 0.0 {
                raw.iter().map(|r| r / total).collect()
            } else {
                pis()
            }
        }
    }
}

/// Group weights for the bank at `alpha`. For `Pilot` this runs a cold-start
/// solve on an independent quarter-size bank, so forward and backward passes
/// get the same split no matter which branch they follow.
pub fn allocation_weights(alpha: f64, mixture: &Mixture, cfg: &SolverConfig, seed: u64) -> Result<Vec<f64>> {
    let signal = static_weights(mixture, cfg.allocation);
    if cfg.allocation != Allocation::Pilot {
        return Ok(signal);
    }
    let pilot_cfg = SolverConfig {
        mc_samples: (cfg.mc_samples / 4).max(cfg.batch_count),
        allocation: Allocation::Signal,
        ..*cfg
    };
    let mut bank = McBank::new(mixture, &pilot_cfg, derive(seed, PILOT_STREAM), alpha_key(alpha))?;
    let sol = solve_with_bank(alpha, mixture, &pilot_cfg, None, &mut bank)?;
    if sol.non_finite {
        return Ok(signal);
    }
    let spread = bank.group_spread(sol.state.theta0, sol.state.theta)?;
    let raw: Vec<f64> = mixture.components.iter().zip(&spread).map(|(c, s)| c.pi * s).collect();
    let total: f64 = raw.iter().sum();
    if !(total.is_finite() && total > 0.0) {
        return Ok(signal);
    }
    Ok(raw
        .iter()
        .zip(&signal)
        .map(|(r, s)| (1.0 - PILOT_DEFENSIVE) * r / total + PILOT_DEFENSIVE * s)
        .collect())
}

/// Offset that keeps pilot samples independent of the main bank.
const PILOT_STREAM: u64 = 0x5049_4c4f_5400_0000;

/// Moments at a given state with a bank keyed by `seed` alone.
pub fn mc_moments(state: &ReplicaState, mixture: &Mixture, cfg: &SolverConfig, seed: u64) -> Result<Moments> {
    McBank::new(mixture, cfg, seed, 0)?.moments(state.theta0, state.theta)
}

/// Bank key for one alpha, so that every solve at that alpha sees the same samples.
pub fn alpha_key(alpha: f64) -> u64 {
    alpha.to_bits()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Forward,
    Backward,
    Selected,
    Empirical,
}

impl Branch {
    pub fn as_str(&self) -> &'static str {
        match self {
            Branch::Forward => "forward",
            Branch::Backward => "backward",
            Branch::Selected => "selected",
            Branch::Empirical => "empirical",
        }
    }
}

/// One `(alpha, mse)` point with diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveRecord {
    pub alpha: f64,
    pub mse: f64,
    pub mse_se_db: f64,
    pub residual: f64,
    pub branch: Branch,
    pub branch_mismatch_db: f64,
    pub converged: bool,
    pub seed: u64,
}

/// Result of one fixed-point solve.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSolution {
    pub state: ReplicaState,
    pub moments: Moments,
    pub iterations: usize,
    pub converged: bool,
    /// The iterate became non-finite; the record is unreliable.
    pub non_finite: bool,
    pub mse: f64,
    pub mse_se: f64,
}

impl AlphaSolution {
    pub fn se_db(&self, cfg: &SolverConfig) -> f64 {
        se_db(self.mse_se, self.mse, cfg.mse_floor)
    }

    pub fn record(&self, alpha: f64, branch: Branch, cfg: &SolverConfig, seed: u64) -> CurveRecord {
        CurveRecord {
            alpha,
            mse: self.mse,
            mse_se_db: self.se_db(cfg),
            residual: self.state.residual,
            branch,
            branch_mismatch_db: 0.0,
            converged: self.converged,
            seed,
        }
    }
}

/// SE on the dB scale; the floor caps the slope of `10 log10` near zero.
pub fn se_db(se: f64, mse: f64, floor: f64) -> f64 {
    10.0 / std::f64::consts::LN_10 * se / mse.max(floor)
}

pub fn to_db(mse: f64, floor: f64) -> f64 {
    10.0 * mse.max(floor).log10()
}

fn cold_start(alpha: f64, mixture: &Mixture, cfg: &SolverConfig) -> (f64, f64) {
    (
        (mixture.sigma0_sq + mixture.signal_power()) / alpha,
        (cfg.lambda_ext + 1.0) / alpha,
    )
}

pub fn solve_alpha(
    alpha: f64,
    mixture: &Mixture,
    cfg: &SolverConfig,
    warm: Option<&ReplicaState>,
    seed: u64,
) -> Result<AlphaSolution> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain("solve_alpha", format!("alpha must be > 0, got {alpha}")));
    }
    let weights = allocation_weights(alpha, mixture, cfg, seed)?;
    solve_alpha_weighted(alpha, mixture, cfg, warm, seed, &weights)
}

fn solve_alpha_weighted(
    alpha: f64,
    mixture: &Mixture,
    cfg: &SolverConfig,
    warm: Option<&ReplicaState>,
    seed: u64,
    weights: &[f64],
) -> Result<AlphaSolution> {
    let mut bank = McBank::with_weights(mixture, cfg, seed, alpha_key(alpha), weights)?;
    solve_with_bank(alpha, mixture, cfg, warm, &mut bank)
}

pub fn solve_with_bank(
    alpha: f64,
    mixture: &Mixture,
    cfg: &SolverConfig,
    warm: Option<&ReplicaState>,
    bank: &mut McBank,
) -> Result<AlphaSolution> {
    let sigma = mixture.sigma0_sq;
    let floor0 = (sigma + cfg.mse_floor) / alpha;
    let (mut theta0, mut theta) = match warm {
        Some(w) if w.theta0.is_finite() && w.theta.is_finite() => (w.theta0, w.theta),
        _ => cold_start(alpha, mixture, cfg),
    };
    theta0 = theta0.max(floor0);
    theta = theta.max(cfg.g_min);
    let w = cfg.damping;
    let mut last = None;
    for it in 1..=cfg.max_iter {
        let m = bank.moments(theta0, theta)?;
        // Residuals are taken on the floored map, so an iterate pinned at a
        // floor counts as a fixed point.
        let theta0_new = ((sigma + m.p_hat) / alpha).max(floor0);
        let theta_new = ((cfg.lambda_ext + m.chi_hat) / alpha).max(cfg.g_min);
        let d0 = (theta0_new - theta0).abs();
        let d1 = (theta_new - theta).abs();
        let residual = d0.max(d1);
        let state = ReplicaState {
            p: m.p_hat,
            chi: m.chi_hat,
            theta,
            theta0,
            residual,
        };
        if !residual.is_finite() || !m.p_hat.is_finite() {
            return Ok(finish(state, m, it, false, true, cfg));
        }
        let rel = (d0 / theta0).max(d1 / theta);
        if residual < cfg.tol && rel < cfg.rel_tol {
            return Ok(finish(state, m, it, true, false, cfg));
        }
        last = Some((state, m));
        theta0 = (1.0 - w) * theta0 + w * theta0_new;
        theta = (1.0 - w) * theta + w * theta_new;
    }
    let (state, m) = last.ok_or_else(|| Error::Internal("no iterations ran".into()))?;
    Ok(finish(state, m, cfg.max_iter, false, false, cfg))
}

fn finish(state: ReplicaState, m: Moments, iterations: usize, converged: bool, non_finite: bool, cfg: &SolverConfig) -> AlphaSolution {
    AlphaSolution {
        state,
        moments: m,
        iterations,
        converged: converged && !non_finite,
        non_finite,
        mse: if state.p.is_finite() { state.p.max(cfg.mse_floor) } else { f64::NAN },
        mse_se: m.p_se,
    }
}

/// Forward and backward continuations plus the selected curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSolution {
    pub forward: Vec<AlphaSolution>,
    pub backward: Vec<AlphaSolution>,
    pub selected: Vec<CurveRecord>,
}

fn check_grid(alpha_grid: &[f64]) -> Result<()> {
    if alpha_grid.is_empty() {
        return Err(Error::domain("solve_curve", "alpha grid is empty"));
    }
    if alpha_grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
        return Err(Error::domain("solve_curve", "alpha values must be positive"));
    }
    if alpha_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::domain("solve_curve", "alpha grid must be strictly ascending"));
    }
    Ok(())
}

pub fn solve_curve(alpha_grid: &[f64], mixture: &Mixture, cfg: &SolverConfig, seed: u64) -> Result<CurveSolution> {
    check_grid(alpha_grid)?;
    let weights: Vec<Vec<f64>> = alpha_grid
        .par_iter()
        .map(|&a| allocation_weights(a, mixture, cfg, seed))
        .collect::<Result<_>>()?;
    let pass = |order: Vec<usize>| -> Result<Vec<(usize, AlphaSolution)>> {
        let mut out = Vec::with_capacity(order.len());
        let mut warm: Option<ReplicaState> = None;
        for i in order {
            let sol = solve_alpha_weighted(alpha_grid[i], mixture, cfg, warm.as_ref(), seed, &weights[i])?;
            warm = if sol.non_finite { None } else { Some(sol.state) };
            out.push((i, sol));
        }
        Ok(out)
    };
    let n = alpha_grid.len();
    let (fwd, bwd) = rayon::join(|| pass((0..n).collect()), || pass((0..n).rev().collect()));
    let forward: Vec<AlphaSolution> = fwd?.into_iter().map(|(_, s)| s).collect();
    let mut bwd = bwd?;
    bwd.sort_by_key(|(i, _)| *i);
    let backward: Vec<AlphaSolution> = bwd.into_iter().map(|(_, s)| s).collect();
    let selected = alpha_grid
        .iter()
        .zip(forward.iter().zip(&backward))
        .map(|(&a, (f, b))| select(a, f, b, cfg, seed))
        .collect();
    Ok(CurveSolution {
        forward,
        backward,
        selected,
    })
}

/// Picks the branch with the smaller mse among converged solutions.
pub fn select(alpha: f64, f: &AlphaSolution, b: &AlphaSolution, cfg: &SolverConfig, seed: u64) -> CurveRecord {
    let pick_fwd = match (f.converged, b.converged) {
        (true, false) => true,
        (false, true) => false,
        _ => !(b.mse < f.mse),
    };
    let chosen = if pick_fwd { f } else { b };
    let mismatch = (to_db(f.mse, cfg.mse_floor) - to_db(b.mse, cfg.mse_floor)).abs();
    let mut rec = chosen.record(alpha, Branch::Selected, cfg, seed);
    rec.branch_mismatch_db = if mismatch.is_finite() { mismatch } else { f64::INFINITY };
    rec
}
