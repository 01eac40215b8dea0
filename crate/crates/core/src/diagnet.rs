//! Two-layer diagonal linear network `beta = v+ w+ - v- w-` trained by
//! full-batch gradient descent on `L = (1/N) ||X beta - y||^2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::penalty::InitParams;
use crate::replica::{Branch, CurveRecord};
use crate::rng::derive;
use crate::task::{sample_dataset, sample_single_task_teacher, sample_teachers, sample_test_set, Dataset, TaskSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkState {
    pub w_plus: Vec<f64>,
    pub w_minus: Vec<f64>,
    pub v_plus: Vec<f64>,
    pub v_minus: Vec<f64>,
}

/// Per-coordinate quantities conserved by gradient flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conserved {
    /// `w+ w- + v+ v-`.
    pub c_product: Vec<f64>,
    /// `((w+)^2 + (w-)^2 + (v+)^2 + (v-)^2) / 2`; equals `c_product` only
    /// while the pathways are symmetric.
    pub c_squared: Vec<f64>,
    /// `(w+)^2 - (v+)^2`.
    pub lambda_plus: Vec<f64>,
    /// `(w-)^2 - (v-)^2`.
    pub lambda_minus: Vec<f64>,
}

impl Conserved {
    /// Largest change of `c_product`, `lambda_plus` or `lambda_minus` relative
    /// to the initial `c_product` of the same coordinate.
    pub fn max_relative_drift(&self, initial: &Conserved) -> f64 {
        let mut worst = 0.0f64;
        for d in 0..self.c_product.len() {
            let scale = initial.c_product[d].abs().max(f64::MIN_POSITIVE);
            let dc = (self.c_product[d] - initial.c_product[d]).abs();
            let dp = (self.lambda_plus[d] - initial.lambda_plus[d]).abs();
            let dm = (self.lambda_minus[d] - initial.lambda_minus[d]).abs();
            worst = worst.max(dc.max(dp).max(dm) / scale);
        }
        worst
    }
}

impl NetworkState {
    pub fn dim(&self) -> usize {
        self.w_plus.len()
    }

    pub fn beta(&self) -> Vec<f64> {
        let mut b = vec![0.0; self.dim()];
        self.beta_into(&mut b);
        b
    }

    fn beta_into(&self, out: &mut [f64]) {
        for (d, o) in out.iter_mut().enumerate() {
            *o = self.v_plus[d] * self.w_plus[d] - self.v_minus[d] * self.w_minus[d];
        }
    }

    pub fn conserved(&self) -> Conserved {
        let n = self.dim();
        let mut c = Conserved {
            c_product: Vec::with_capacity(n),
            c_squared: Vec::with_capacity(n),
            lambda_plus: Vec::with_capacity(n),
            lambda_minus: Vec::with_capacity(n),
        };
        for d in 0..n {
            let (wp, wm, vp, vm) = (self.w_plus[d], self.w_minus[d], self.v_plus[d], self.v_minus[d]);
            c.c_product.push(wp * wm + vp * vm);
            c.c_squared.push(0.5 * (wp * wp + wm * wm + vp * vp + vm * vm));
            c.lambda_plus.push(wp * wp - vp * vp);
            c.lambda_minus.push(wm * wm - vm * vm);
        }
        c
    }

    fn symmetric(d: usize, w: impl Fn(usize) -> f64, v: f64) -> Self {
        let w: Vec<f64> = (0..d).map(w).collect();
        NetworkState {
            w_plus: w.clone(),
            w_minus: w,
            v_plus: vec![v; d],
            v_minus: vec![v; d],
        }
    }
}

/// `w = sqrt(c (1 + lambda) / 2)`, `v = sqrt(c (1 - lambda) / 2)` on every
/// coordinate and pathway, so `c = w+ w- + v+ v-` and `(w^2 - v^2)/c = lambda`.
pub fn init_single_task(init: &InitParams, d: usize) -> NetworkState {
    let c = init.c_pt();
    let lam = init.lambda_pt();
    let w = (0.5 * c * (1.0 + lam)).sqrt();
    let v = (0.5 * c * (1.0 - lam)).max(0.0).sqrt();
    NetworkState::symmetric(d, |_| w, v)
}

/// Fine-tuning start reached after pretraining to convergence on `beta_pt`.
///
/// The hidden weights are the rebalanced sum `w+(inf) + w-(inf)`, which in
/// closed form is `sqrt(c_pt (1 + lambda_pt) (1 + sqrt(1 + (beta_pt/c_pt)^2)))`.
/// Both readouts restart at `gamma_ft / sqrt(2)`, so that the conserved
/// `c_ft = w^2 + gamma_ft^2 / 2` gives `4 c_ft^2 = k_law` exactly.
pub fn init_finetune_oracle(init: &InitParams, beta_pt: &[f64]) -> Result<NetworkState> {
    let c = init.c_pt();
    let h = init.hidden_scale();
    if !(h >= 0.0) {
        return Err(Error::domain("init_finetune_oracle", format!("lambda_tilde + c_pt = {h} < 0")));
    }
    if let Some(b) = beta_pt.iter().find(|b| !b.is_finite()) {
        return Err(Error::domain("init_finetune_oracle", format!("non-finite beta_pt {b}")));
    }
    let v = init.gamma_ft() / std::f64::consts::SQRT_2;
    Ok(NetworkState::symmetric(
        beta_pt.len(),
        |d| (h * (1.0 + 1f64.hypot(beta_pt[d] / c))).sqrt(),
        v,
    ))
}

/// Rebalances a trained single-task network into a fine-tuning start:
/// `w+- = w+ + w-` and `v+- = gamma_ft / sqrt(2)`.
pub fn rebalance(pretrained: &NetworkState, gamma_ft: f64) -> NetworkState {
    let d = pretrained.dim();
    NetworkState::symmetric(
        d,
        |i| pretrained.w_plus[i] + pretrained.w_minus[i],
        gamma_ft / std::f64::consts::SQRT_2,
    )
}

/// In config files a plain number is a fixed step and `{ fraction = f }`
/// selects the adaptive step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StepSize {
    Fixed(f64),
    /// Per-epoch step `fraction * 2 / B`, where `B` bounds the largest
    /// Hessian eigenvalue of the loss in the weights at the current iterate.
    Auto { fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: StepSize,
    pub max_epochs: u64,
    pub loss_threshold: f64,
    /// Undo an epoch that increased the loss and halve the step from then on.
    pub halve_on_increase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: StepSize::Auto { fraction: 0.5 },
            max_epochs: 5_000_000,
            loss_threshold: 1e-8,
            halve_on_increase: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        match self.learning_rate {
            StepSize::Fixed(lr) if !(lr.is_finite() && lr > 0.0) => {
                return Err(Error::config("train.learning_rate", format!("must be > 0, got {lr}")))
            }
            StepSize::Auto { fraction } if !(fraction > 0.0 && fraction < 1.0) => {
                return Err(Error::config(
                    "train.learning_rate.fraction",
                    format!("must lie in (0, 1), got {fraction}"),
                ))
            }
            _ => {}
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be >= 1"));
        }
        if !(self.loss_threshold.is_finite() && self.loss_threshold > 0.0) {
            return Err(Error::config("train.loss_threshold", "must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub state: NetworkState,
    pub epochs: u64,
    pub final_loss: f64,
    pub converged: bool,
    pub halvings: u32,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Training loss and `grad = (2/N) X^T (X beta - y)`, in one pass over `X`.
fn loss_and_grad(data: &Dataset, beta: &[f64], grad: &mut [f64]) -> f64 {
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut loss = 0.0;
    for i in 0..data.n {
        let row = data.row(i);
        let r = dot(row, beta) - data.y[i];
        loss += r * r;
        for (g, x) in grad.iter_mut().zip(row) {
            *g += r * x;
        }
    }
    let s = 2.0 / data.n as f64;
    grad.iter_mut().for_each(|g| *g *= s);
    loss / data.n as f64
}

pub fn training_loss(state: &NetworkState, data: &Dataset) -> f64 {
    let beta = state.beta();
    let mut g = vec![0.0; data.d];
    loss_and_grad(data, &beta, &mut g)
}

/// Largest eigenvalue of `X^T X` by power iteration, inflated slightly so it
/// is an upper bound in practice.
fn gram_top_eigenvalue(data: &Dataset) -> f64 {
    let mut u = vec![1.0 / (data.d as f64).sqrt(); data.d];
    let mut w = vec![0.0; data.d];
    let mut est = 0.0;
    for _ in 0..50 {
        w.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..data.n {
            let row = data.row(i);
            let r = dot(row, &u);
            for (a, x) in w.iter_mut().zip(row) {
                *a += r * x;
            }
        }
        let norm = dot(&w, &w).sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        let next = norm;
        u.iter_mut().zip(&w).for_each(|(a, b)| *a = b / norm);
        if (next - est).abs() <= 1e-6 * next {
            est = next;
            break;
        }
        est = next;
    }
    1.05 * est
}

/// Full-batch gradient descent from `state` until the loss falls below
/// `cfg.loss_threshold` or `cfg.max_epochs` updates have been made.
pub fn train(state: NetworkState, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let d = state.dim();
    if data.d != d || state.w_minus.len() != d || state.v_plus.len() != d || state.v_minus.len() != d {
        return Err(Error::Dimension(format!("network has {d} coordinates, data has {}", data.d)));
    }
    let curvature = match cfg.learning_rate {
        StepSize::Auto { .. } => 2.0 / data.n as f64 * gram_top_eigenvalue(data),
        StepSize::Fixed(_) => 0.0,
    };

    let mut s = state;
    let mut prev = s.clone();
    let mut beta = vec![0.0; d];
    let mut grad = vec![0.0; d];
    let mut factor = 1.0f64;
    let mut halvings = 0u32;
    s.beta_into(&mut beta);
    let mut loss = loss_and_grad(data, &beta, &mut grad);
    if !loss.is_finite() {
        return Err(Error::Divergence { epoch: 0, loss });
    }
    let initial = loss;
    let mut prev_loss = f64::INFINITY;
    let mut epoch = 0u64;

    loop {
        if cfg.halve_on_increase && loss > prev_loss {
            // Undo the last step and retry it with half the step size.
            std::mem::swap(&mut s, &mut prev);
            factor *= 0.5;
            halvings += 1;
            s.beta_into(&mut beta);
            loss = loss_and_grad(data, &beta, &mut grad);
            if halvings > 60 {
                return Err(Error::Divergence { epoch, loss });
            }
        }
        if loss < cfg.loss_threshold || epoch >= cfg.max_epochs {
            break;
        }
        let lr = factor
            * match cfg.learning_rate {
                StepSize::Fixed(lr) => lr,
                StepSize::Auto { fraction } => {
                    let mut scale = 0.0f64;
                    let mut gmax = 0.0f64;
                    for i in 0..d {
                        let sq = s.w_plus[i] * s.w_plus[i]
                            + s.v_plus[i] * s.v_plus[i]
                            + s.w_minus[i] * s.w_minus[i]
                            + s.v_minus[i] * s.v_minus[i];
                        scale = scale.max(sq);
                        gmax = gmax.max(grad[i].abs());
                    }
                    fraction * 2.0 / (curvature * scale + gmax)
                }
            };
        if cfg.halve_on_increase {
            prev.clone_from(&s);
        }
        for i in 0..d {
            let g = lr * grad[i];
            let (wp, vp, wm, vm) = (s.w_plus[i], s.v_plus[i], s.w_minus[i], s.v_minus[i]);
            s.w_plus[i] = wp - g * vp;
            s.v_plus[i] = vp - g * wp;
            s.w_minus[i] = wm + g * vm;
            s.v_minus[i] = vm + g * wm;
            beta[i] = s.v_plus[i] * s.w_plus[i] - s.v_minus[i] * s.w_minus[i];
        }
        epoch += 1;
        prev_loss = loss;
        loss = loss_and_grad(data, &beta, &mut grad);
        if !loss.is_finite() || loss > 1e6 * initial.max(f64::MIN_POSITIVE) {
            if cfg.halve_on_increase && loss.is_finite() {
                continue;
            }
            return Err(Error::Divergence { epoch, loss });
        }
    }
    Ok(TrainOutcome {
        state: s,
        epochs: epoch,
        converged: loss < cfg.loss_threshold,
        final_loss: loss,
        halvings,
    })
}

/// `||teacher - beta||^2`.
pub fn coefficient_error(state: &NetworkState, teacher: &[f64]) -> Result<f64> {
    if teacher.len() != state.dim() {
        return Err(Error::Dimension(format!(
            "teacher has {} coordinates, network has {}",
            teacher.len(),
            state.dim()
        )));
    }
    Ok(state.beta().iter().zip(teacher).map(|(b, t)| (t - b).powi(2)).sum())
}

/// Mean squared prediction error on a held-out set, with its standard error.
pub fn test_mse(state: &NetworkState, test: &Dataset) -> Result<(f64, f64)> {
    if test.d != state.dim() {
        return Err(Error::Dimension(format!("test set has {} coordinates", test.d)));
    }
    let beta = state.beta();
    let sq: Vec<f64> = (0..test.n).map(|i| (dot(test.row(i), &beta) - test.y[i]).powi(2)).collect();
    let n = sq.len() as f64;
    let mean = sq.iter().sum::<f64>() / n;
    let var = sq.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Number of training samples `round(alpha d)`, ties to even.
pub fn sample_count(alpha: f64, d: usize) -> Result<usize> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::domain("sample_count", format!("alpha must be > 0, got {alpha}")));
    }
    if (alpha * d as f64).floor() < 1.0 {
        return Err(Error::domain("sample_count", format!("floor(alpha d) = 0 for alpha={alpha}, d={d}")));
    }
    Ok((alpha * d as f64).round_ties_even() as usize)
}

/// One fine-tuning run with everything needed to interpret it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRun {
    pub record: CurveRecord,
    pub epochs: u64,
    pub final_loss: f64,
    pub halvings: u32,
    /// `||beta* - beta_hat||^2` (not divided by `d`).
    pub coefficient_error: f64,
    /// Largest relative drift of the conserved quantities over training.
    pub conserved_drift: f64,
    pub n_train: usize,
}

fn finish(
    start: NetworkState,
    teacher: &[f64],
    data: &Dataset,
    cfg: &TrainConfig,
    alpha: f64,
    seed: u64,
) -> Result<EmpiricalRun> {
    let c0 = start.conserved();
    let out = train(start, data, cfg)?;
    let err = coefficient_error(&out.state, teacher)?;
    let d = teacher.len() as f64;
    Ok(EmpiricalRun {
        record: CurveRecord {
            alpha,
            mse: err / d,
            mse_se_db: f64::NAN,
            residual: out.final_loss,
            branch: Branch::Empirical,
            branch_mismatch_db: f64::NAN,
            converged: out.converged,
            seed,
        },
        epochs: out.epochs,
        final_loss: out.final_loss,
        halvings: out.halvings,
        coefficient_error: err,
        conserved_drift: out.state.conserved().max_relative_drift(&c0),
        n_train: data.n,
    })
}

/// Fine-tuning from the infinite-pretraining state on `round(alpha d)` samples.
/// The record's `mse` is the per-coordinate coefficient error `||beta* - beta||^2 / d`.
pub fn run_ptft(
    init: &InitParams,
    spec: &TaskSpec,
    d: usize,
    alpha_ft: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EmpiricalRun> {
    let n = sample_count(alpha_ft, d)?;
    let teachers = sample_teachers(spec, d, seed)?;
    let start = init_finetune_oracle(init, &teachers.beta_pt)?;
    let data = sample_dataset(&teachers.beta_ft, n, spec.sigma0_sq(), seed)?;
    finish(start, &teachers.beta_ft, &data, cfg, alpha_ft, seed)
}

/// Plain single-task training from [`init_single_task`] on a sparse sign teacher.
pub fn run_single_task(
    init: &InitParams,
    rho: f64,
    sigma0_sq: f64,
    d: usize,
    alpha: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<EmpiricalRun> {
    let n = sample_count(alpha, d)?;
    let teacher = sample_single_task_teacher(rho, d, seed)?;
    let data = sample_dataset(&teacher, n, sigma0_sq, seed)?;
    finish(init_single_task(init, d), &teacher, &data, cfg, alpha, seed)
}

/// Both stages trained explicitly: pretraining on `round(alpha_pt d)` noiseless
/// samples of `beta_pt`, rebalancing, then fine-tuning as in [`run_ptft`].
/// Only meant for checking the closed-form fine-tuning start.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoStageRun {
    pub pretrained: TrainOutcome,
    pub finetune_start: NetworkState,
    pub finetune: EmpiricalRun,
}

pub fn run_two_stage(
    init: &InitParams,
    spec: &TaskSpec,
    d: usize,
    alpha_pt: f64,
    alpha_ft: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TwoStageRun> {
    let n_pt = sample_count(alpha_pt, d)?;
    let n_ft = sample_count(alpha_ft, d)?;
    let teachers = sample_teachers(spec, d, seed)?;
    let pt_data = sample_dataset(&teachers.beta_pt, n_pt, 0.0, derive(seed, 0x5054))?;
    let pretrained = train(init_single_task(init, d), &pt_data, cfg)?;
    let start = rebalance(&pretrained.state, init.gamma_ft());
    let data = sample_dataset(&teachers.beta_ft, n_ft, spec.sigma0_sq(), seed)?;
    let finetune = finish(start.clone(), &teachers.beta_ft, &data, cfg, alpha_ft, seed)?;
    Ok(TwoStageRun {
        pretrained,
        finetune_start: start,
        finetune,
    })
}

/// Held-out prediction error of a trained state on `n_test` fresh samples.
pub fn held_out_mse(state: &NetworkState, teacher: &[f64], n_test: usize, sigma0_sq: f64, seed: u64) -> Result<(f64, f64)> {
    let test = sample_test_set(teacher, n_test, sigma0_sq, seed)?;
    test_mse(state, &test)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::penalty::k_law;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn params(c: f64, l: f64, g: f64) -> InitParams {
        InitParams::new(c, l, g).unwrap()
    }

    #[test]
    fn single_task_init_examples() {
        let s = init_single_task(&params(1.0, 0.0, 0.0), 3);
        assert_relative_eq!(s.w_plus[0], 0.5f64.sqrt(), max_relative = 1e-15);
        assert_relative_eq!(s.v_minus[2], 0.5f64.sqrt(), max_relative = 1e-15);
        let s = init_single_task(&params(1.0, 1.0, 0.0), 2);
        assert_eq!((s.w_plus[1], s.v_plus[1]), (1.0, 0.0));
        for &(c, l) in &[(1e-3, 0.3), (2.0, -0.7), (1e-8, 0.0)] {
            let s = init_single_task(&params(c, l, 0.0), 4);
            let q = s.conserved();
            assert_relative_eq!(q.c_product[1], c, max_relative = 1e-14);
            assert_relative_eq!(q.lambda_plus[1] / c, l, epsilon = 1e-14);
            assert!(s.beta().iter().all(|&b| b == 0.0));
        }
    }

    #[test]
    fn finetune_oracle_examples() {
        let s = init_finetune_oracle(&params(0.3, 0.0, 0.0), &[0.0, 0.0]).unwrap();
        assert_relative_eq!(s.w_plus[0], (2.0f64 * 0.3).sqrt(), max_relative = 1e-15);
        let s = init_finetune_oracle(&params(0.3, -1.0, 0.0), &[2.0]).unwrap();
        assert_eq!(s.w_plus[0], 0.0);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let c = 10f64.powf(rng.random_range(-6.0..1.0));
            let init = params(c, rng.random_range(-1.0..1.0), rng.random_range(0.0..3.0));
            let b = rng.random_range(-5.0..5.0);
            let s = init_finetune_oracle(&init, &[b]).unwrap();
            let c_ft = s.conserved().c_product[0];
            assert_relative_eq!(4.0 * c_ft * c_ft, k_law(&init, b).unwrap(), max_relative = 1e-12);
            assert_eq!(s.beta()[0], 0.0);
        }
    }

    fn gaussian_data(d: usize, n: usize, sigma0_sq: f64, seed: u64) -> (Vec<f64>, Dataset) {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let teacher: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = sample_dataset(&teacher, n, sigma0_sq, seed).unwrap();
        (teacher, data)
    }

    #[test]
    fn zero_labels_are_stationary() {
        let (_, mut data) = gaussian_data(10, 5, 0.0, 1);
        data.y.iter_mut().for_each(|y| *y = 0.0);
        let s = init_finetune_oracle(&params(0.1, 0.2, 0.0), &[1.0; 10]).unwrap();
        let cfg = TrainConfig {
            max_epochs: 50,
            ..TrainConfig::default()
        };
        let out = train(s.clone(), &data, &cfg).unwrap();
        assert_eq!(out.state, s);
        assert_eq!(out.final_loss, 0.0);
    }

    #[test]
    fn overdetermined_matches_normal_equations() {
        let (d, n) = (50, 200);
        let (_, data) = gaussian_data(d, n, 0.05, 4);
        // Least-squares oracle from the normal equations via Gaussian elimination.
        let mut a = vec![vec![0.0; d + 1]; d];
        for i in 0..n {
            let row = data.row(i);
            for p in 0..d {
                for q in 0..d {
                    a[p][q] += row[p] * row[q];
                }
                a[p][d] += row[p] * data.y[i];
            }
        }
        for col in 0..d {
            let piv = (col..d).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..d {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=d {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let ls: Vec<f64> = (0..d).map(|p| a[p][d] / a[p][p]).collect();
        let cfg = TrainConfig {
            learning_rate: StepSize::Auto { fraction: 0.25 },
            max_epochs: 200_000,
            loss_threshold: 1e-300,
            halve_on_increase: true,
        };
        let out = train(init_single_task(&params(1.0, 0.0, 0.0), d), &data, &cfg).unwrap();
        let beta = out.state.beta();
        for p in 0..d {
            assert!((beta[p] - ls[p]).abs() < 1e-2, "{p}: {} vs {}", beta[p], ls[p]);
        }
    }

    #[test]
    fn auto_step_interpolates_sparse_teacher() {
        let spec = TaskSpec::new(0.1, 0.1, 0.0, 0.0).unwrap();
        let cfg = TrainConfig {
            loss_threshold: 1e-10,
            ..TrainConfig::default()
        };
        let run = run_ptft(&params(1e-3, 0.0, 0.0), &spec, 200, 0.5, &cfg, 3).unwrap();
        assert!(run.record.converged);
        assert!(run.record.mse < 1e-2, "{}", run.record.mse);
        let again = run_ptft(&params(1e-3, 0.0, 0.0), &spec, 200, 0.5, &cfg, 3).unwrap();
        assert_eq!(format!("{run:?}"), format!("{again:?}"));
        assert_eq!(run.n_train, 100);
    }

    #[test]
    fn drift_is_first_order_in_step() {
        let (d, n) = (50, 100);
        let (_, data) = gaussian_data(d, n, 0.0, 9);
        let run = |lr: f64, steps: u64| {
            let s = init_single_task(&params(0.5, 0.2, 0.0), d);
            let c0 = s.conserved();
            let cfg = TrainConfig {
                learning_rate: StepSize::Fixed(lr),
                max_epochs: steps,
                loss_threshold: 1e-300,
                halve_on_increase: false,
            };
            train(s, &data, &cfg).unwrap().state.conserved().max_relative_drift(&c0)
        };
        let (a, b) = (run(0.2, 1000), run(0.1, 2000));
        assert!(a > 0.0 && b > 0.0);
        let ratio = a / b;
        assert!((1.5..=2.5).contains(&ratio), "{a} {b} {ratio}");
    }

    #[test]
    fn coefficient_error_examples() {
        let mut s = init_single_task(&params(1.0, 1.0, 0.0), 3);
        assert_eq!(coefficient_error(&s, &[0.0; 3]).unwrap(), 0.0);
        let rho = 0.25f64;
        assert_relative_eq!(
            coefficient_error(&s, &[1.0 / rho.sqrt(), 0.0, 0.0]).unwrap(),
            1.0 / rho,
            max_relative = 1e-15
        );
        s.v_plus = vec![2.0, 0.0, 0.0];
        assert_eq!(coefficient_error(&s, &[2.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(coefficient_error(&s, &[0.0; 2]).is_err());
    }

    #[test]
    fn test_mse_tracks_coefficient_error() {
        // With X_ij ~ N(0, 1/d) the population risk is ||beta* - beta||^2 / d + sigma^2.
        let d = 40;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let teacher: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let mut s = init_single_task(&params(1.0, 1.0, 0.0), d);
        s.v_plus = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let err = coefficient_error(&s, &teacher).unwrap();
        let (m, se) = held_out_mse(&s, &teacher, 10_000, 0.0, 8).unwrap();
        assert!((m - err / d as f64).abs() < 3.0 * se, "{m} {} {se}", err / d as f64);
    }

    #[test]
    fn sample_count_rounds_half_to_even() {
        assert_eq!(sample_count(0.5, 5).unwrap(), 2);
        assert_eq!(sample_count(0.5, 7).unwrap(), 4);
        assert_eq!(sample_count(0.3, 10).unwrap(), 3);
        assert!(sample_count(0.05, 10).is_err());
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        let (_, data) = gaussian_data(5, 5, 0.0, 0);
        let s = init_single_task(&params(1.0, 0.0, 0.0), 4);
        assert!(matches!(train(s, &data, &TrainConfig::default()), Err(Error::Dimension(_))));
    }

    #[test]
    fn fixed_step_divergence_is_reported() {
        let (_, data) = gaussian_data(20, 20, 0.0, 1);
        let cfg = TrainConfig {
            learning_rate: StepSize::Fixed(1e4),
            max_epochs: 1000,
            loss_threshold: 1e-12,
            halve_on_increase: false,
        };
        let err = train(init_single_task(&params(1.0, 0.0, 0.0), 20), &data, &cfg).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }));
    }

    #[test]
    fn two_stage_start_matches_closed_form() {
        let spec = TaskSpec::new(0.2, 0.1, 0.1, 0.0).unwrap();
        let init = params(0.05, 0.3, 0.5);
        let d = 40;
        let teachers = sample_teachers(&spec, d, 12).unwrap();
        let oracle = init_finetune_oracle(&init, &teachers.beta_pt).unwrap();
        for (fraction, tol) in [(0.5, 0.2), (0.05, 2e-2)] {
            let cfg = TrainConfig {
                learning_rate: StepSize::Auto { fraction },
                loss_threshold: 1e-14,
                ..TrainConfig::default()
            };
            let run = run_two_stage(&init, &spec, d, 3.0, 0.5, &cfg, 12).unwrap();
            assert!(run.pretrained.converged);
            let pt = &run.pretrained.state;
            let cons = pt.conserved();
            let beta = pt.beta();
            for i in 0..d {
                // Exact in terms of the conserved quantities the run ended with.
                let (c, lt) = (cons.c_product[i], cons.lambda_plus[i]);
                let w = ((lt + c) * (1.0 + 1f64.hypot(beta[i] / c))).sqrt();
                assert_relative_eq!(run.finetune_start.w_plus[i], w, max_relative = 1e-9);
                // Against the nominal start, up to the step-size drift.
                assert_relative_eq!(run.finetune_start.w_plus[i], oracle.w_plus[i], max_relative = tol);
            }
            assert_eq!(run.finetune_start.v_plus, oracle.v_plus);
        }
    }
}
