//! Spike-and-slab teacher pairs and Gaussian-design datasets.
//!
//! Pretraining teachers are sign vectors `±a_pt/sqrt(rho_pt)` on a Bernoulli
//! support. Fine-tuning teachers share part of that support (`rho_ft_shared`),
//! add new coordinates (`rho_ft_new`), and carry Gaussian entries of variance
//! `1/rho_ft`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, Purpose};

fn default_a_pt() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTask", into = "RawTask")]
pub struct TaskSpec {
    rho_pt: f64,
    rho_ft_shared: f64,
    rho_ft_new: f64,
    sigma0_sq: f64,
    a_pt: f64,
}

#[derive(Serialize, Deserialize)]
struct RawTask {
    rho_pt: f64,
    rho_ft_shared: f64,
    rho_ft_new: f64,
    #[serde(default)]
    sigma0_sq: f64,
    #[serde(default = "default_a_pt")]
    a_pt: f64,
}

impl TryFrom<RawTask> for TaskSpec {
    type Error = Error;
    fn try_from(r: RawTask) -> Result<Self> {
        TaskSpec::new(r.rho_pt, r.rho_ft_shared, r.rho_ft_new, r.sigma0_sq)?.with_a_pt(r.a_pt)
    }
}

impl From<TaskSpec> for RawTask {
    fn from(t: TaskSpec) -> Self {
        RawTask {
            rho_pt: t.rho_pt,
            rho_ft_shared: t.rho_ft_shared,
            rho_ft_new: t.rho_ft_new,
            sigma0_sq: t.sigma0_sq,
            a_pt: t.a_pt,
        }
    }
}

// Slack for parameters that are computed, e.g. omega * rho_ft.
const PROB_SLACK: f64 = 1e-12;

impl TaskSpec {
    pub fn new(rho_pt: f64, rho_ft_shared: f64, rho_ft_new: f64, sigma0_sq: f64) -> Result<Self> {
        let bad = |detail: String| Err(Error::domain("TaskSpec", detail));
        if !(rho_pt > 0.0 && rho_pt <= 1.0) {
            return bad(format!("rho_pt must lie in (0, 1], got {rho_pt}"));
        }
        if !(rho_ft_shared >= 0.0 && rho_ft_shared <= rho_pt + PROB_SLACK) {
            return bad(format!(
                "rho_ft_shared must lie in [0, rho_pt = {rho_pt}], got {rho_ft_shared}"
            ));
        }
        if !(rho_ft_new >= 0.0 && rho_ft_new <= 1.0 - rho_pt + PROB_SLACK) {
            return bad(format!(
                "rho_ft_new must lie in [0, 1 - rho_pt = {}], got {rho_ft_new}",
                1.0 - rho_pt
            ));
        }
        if rho_ft_shared + rho_ft_new <= 0.0 {
            return bad("rho_ft_shared + rho_ft_new must be > 0".into());
        }
        if !(sigma0_sq.is_finite() && sigma0_sq >= 0.0) {
            return bad(format!("sigma0_sq must be >= 0, got {sigma0_sq}"));
        }
        Ok(TaskSpec {
            rho_pt,
            rho_ft_shared: rho_ft_shared.min(rho_pt),
            rho_ft_new: rho_ft_new.min(1.0 - rho_pt),
            sigma0_sq,
            a_pt: 1.0,
        })
    }

    /// Overlap-fraction shorthand: `rho_ft_shared = omega rho_ft`, `rho_ft_new = (1 - omega) rho_ft`.
    pub fn from_overlap(rho_pt: f64, rho_ft: f64, omega: f64, sigma0_sq: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&omega) {
            return Err(Error::domain("TaskSpec", format!("omega must lie in [0, 1], got {omega}")));
        }
        Self::new(rho_pt, omega * rho_ft, (1.0 - omega) * rho_ft, sigma0_sq)
    }

    /// Multiplier on the pretraining teacher (1 unless stated otherwise).
    pub fn with_a_pt(mut self, a_pt: f64) -> Result<Self> {
        if !(a_pt.is_finite() && a_pt > 0.0) {
            return Err(Error::domain("TaskSpec", format!("a_pt must be > 0, got {a_pt}")));
        }
        self.a_pt = a_pt;
        Ok(self)
    }

    pub fn with_sigma0_sq(self, sigma0_sq: f64) -> Result<Self> {
        Self::new(self.rho_pt, self.rho_ft_shared, self.rho_ft_new, sigma0_sq)?.with_a_pt(self.a_pt)
    }

    pub fn rho_pt(&self) -> f64 {
        self.rho_pt
    }
    pub fn rho_ft_shared(&self) -> f64 {
        self.rho_ft_shared
    }
    pub fn rho_ft_new(&self) -> f64 {
        self.rho_ft_new
    }
    pub fn sigma0_sq(&self) -> f64 {
        self.sigma0_sq
    }
    pub fn a_pt(&self) -> f64 {
        self.a_pt
    }
    pub fn rho_ft(&self) -> f64 {
        self.rho_ft_shared + self.rho_ft_new
    }
    pub fn omega(&self) -> f64 {
        self.rho_ft_shared / self.rho_ft()
    }

    /// Magnitude of nonzero pretraining coefficients.
    pub fn beta_pt_magnitude(&self) -> f64 {
        self.a_pt / self.rho_pt.sqrt()
    }

    /// `P(theta_ft = 1 | theta_pt = 1)` and `P(theta_ft = 1 | theta_pt = 0)`.
    pub fn conditional_rates(&self) -> (f64, f64) {
        let on = self.rho_ft_shared / self.rho_pt;
        let off = if self.rho_pt < 1.0 {
            self.rho_ft_new / (1.0 - self.rho_pt)
        } else {
            0.0
        };
        (on, off)
    }
}

/// Law of one teacher coefficient within a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BetaLaw {
    Zero,
    Gaussian { var: f64 },
    /// `±magnitude` with equal probability.
    Sign { magnitude: f64 },
}

impl BetaLaw {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            BetaLaw::Zero => 0.0,
            BetaLaw::Gaussian { var } => var.sqrt() * rng.sample::<f64, _>(StandardNormal),
            BetaLaw::Sign { magnitude } => {
                if rng.random::<bool>() {
                    magnitude
                } else {
                    -magnitude
                }
            }
        }
    }

    pub fn second_moment(&self) -> f64 {
        match *self {
            BetaLaw::Zero => 0.0,
            BetaLaw::Gaussian { var } => var,
            BetaLaw::Sign { magnitude } => magnitude * magnitude,
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, BetaLaw::Zero)
    }
}

/// One of the four groups indexed by `(theta_pt, theta_ft)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupLaw {
    pub pi: f64,
    pub theta_pt: bool,
    pub theta_ft: bool,
    pub beta_pt: BetaLaw,
    pub beta_ft: BetaLaw,
}

/// Groups in the order (0,0), (0,1), (1,0), (1,1) of `(theta_pt, theta_ft)`.
pub fn group_mixture(spec: &TaskSpec) -> [GroupLaw; 4] {
    let (rp, rs, rn) = (spec.rho_pt, spec.rho_ft_shared, spec.rho_ft_new);
    let pt = BetaLaw::Sign {
        magnitude: spec.beta_pt_magnitude(),
    };
    let ft = BetaLaw::Gaussian { var: 1.0 / spec.rho_ft() };
    let g = |pi: f64, tp: bool, tf: bool| GroupLaw {
        pi: pi.max(0.0),
        theta_pt: tp,
        theta_ft: tf,
        beta_pt: if tp { pt } else { BetaLaw::Zero },
        beta_ft: if tf { ft } else { BetaLaw::Zero },
    };
    [
        g(1.0 - rp - rn, false, false),
        g(rn, false, true),
        g(rp - rs, true, false),
        g(rs, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct TeacherPair {
    pub beta_pt: Vec<f64>,
    pub beta_ft: Vec<f64>,
    pub active_pt: Vec<bool>,
    pub active_ft: Vec<bool>,
}

impl TeacherPair {
    pub fn dim(&self) -> usize {
        self.beta_pt.len()
    }
}

pub fn sample_teachers(spec: &TaskSpec, d: usize, seed: u64) -> Result<TeacherPair> {
    if d == 0 {
        return Err(Error::domain("sample_teachers", "d must be >= 1"));
    }
    let (on, off) = spec.conditional_rates();
    if on > 1.0 + PROB_SLACK || off > 1.0 + PROB_SLACK {
        return Err(Error::Internal(format!(
            "conditional activation rate exceeds 1 ({on}, {off})"
        )));
    }
    let mag = spec.beta_pt_magnitude();
    let sd_ft = (1.0 / spec.rho_ft()).sqrt();
    let mut rng = stream(seed, Purpose::Teacher);
    let mut t = TeacherPair {
        beta_pt: Vec::with_capacity(d),
        beta_ft: Vec::with_capacity(d),
        active_pt: Vec::with_capacity(d),
        active_ft: Vec::with_capacity(d),
    };
    for _ in 0..d {
        // A fixed number of draws per coordinate keeps coordinates aligned across specs.
        let u_pt: f64 = rng.random();
        let sign: bool = rng.random();
        let u_ft: f64 = rng.random();
        let z: f64 = rng.sample(StandardNormal);
        let a_pt = u_pt < spec.rho_pt;
        let a_ft = u_ft < if a_pt { on } else { off };
        t.active_pt.push(a_pt);
        t.active_ft.push(a_ft);
        t.beta_pt.push(match (a_pt, sign) {
            (false, _) => 0.0,
            (true, true) => mag,
            (true, false) => -mag,
        });
        t.beta_ft.push(if a_ft { sd_ft * z } else { 0.0 });
    }
    Ok(t)
}

/// Single-task teacher: each coordinate is active with probability `rho` and
/// then takes the value `+-1/sqrt(rho)`, so `E[beta^2] = 1`.
pub fn sample_single_task_teacher(rho: f64, d: usize, seed: u64) -> Result<Vec<f64>> {
    if !(rho > 0.0 && rho <= 1.0) {
        return Err(Error::domain("sample_single_task_teacher", format!("rho must lie in (0, 1], got {rho}")));
    }
    if d == 0 {
        return Err(Error::domain("sample_single_task_teacher", "d must be >= 1"));
    }
    let mag = 1.0 / rho.sqrt();
    let mut rng = stream(seed, Purpose::Teacher);
    Ok((0..d)
        .map(|_| {
            let u: f64 = rng.random();
            let sign: bool = rng.random();
            match (u < rho, sign) {
                (false, _) => 0.0,
                (true, true) => mag,
                (true, false) => -mag,
            }
        })
        .collect())
}

/// Row-major design matrix and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub n: usize,
    pub d: usize,
}

impl Dataset {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn alpha(&self) -> f64 {
        self.n as f64 / self.d as f64
    }
}

fn sample_design(
    teacher: &[f64],
    n: usize,
    sigma0_sq: f64,
    seed: u64,
    design: Purpose,
    noise: Purpose,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::domain("sample_dataset", "n must be >= 1"));
    }
    let d = teacher.len();
    if d == 0 {
        return Err(Error::domain("sample_dataset", "teacher must be nonempty"));
    }
    if !(sigma0_sq.is_finite() && sigma0_sq >= 0.0) {
        return Err(Error::domain("sample_dataset", format!("sigma0_sq must be >= 0, got {sigma0_sq}")));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let mut xr = stream(seed, design);
    let x: Vec<f64> = (0..n * d)
        .map(|_| scale * xr.sample::<f64, _>(StandardNormal))
        .collect();
    let mut nr = stream(seed, noise);
    let sd = sigma0_sq.sqrt();
    let y = x
        .chunks_exact(d)
        .map(|row| {
            let clean: f64 = row.iter().zip(teacher).map(|(a, b)| a * b).sum();
            if sd > 0.0 {
                clean + sd * nr.sample::<f64, _>(StandardNormal)
            } else {
                clean
            }
        })
        .collect();
    Ok(Dataset { x, y, n, d })
}

/// Training set `y = X beta + eps` with `X_ij ~ N(0, 1/d)` and `eps ~ N(0, sigma0_sq)`.
pub fn sample_dataset(teacher: &[f64], n: usize, sigma0_sq: f64, seed: u64) -> Result<Dataset> {
    sample_design(teacher, n, sigma0_sq, seed, Purpose::Design, Purpose::Noise)
}

/// Held-out set drawn from streams disjoint from [`sample_dataset`].
pub fn sample_test_set(teacher: &[f64], n: usize, sigma0_sq: f64, seed: u64) -> Result<Dataset> {
    sample_design(teacher, n, sigma0_sq, seed, Purpose::TestSet, Purpose::TestNoise)
}
