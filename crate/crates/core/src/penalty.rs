//! The `q_k` penalty family selected by gradient flow during fine-tuning,
//! the map from initialization to per-coordinate `k`, and the learning-regime
//! metrics (ℓ-order, pretraining dependence, transfer sensitivity).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Initialization knobs of the pretrain/fine-tune protocol.
///
/// `lambda_pt` is stored normalized to `[-1, 1]`; the unnormalized relative
/// scale `lambda_pt * c_pt` is available through [`InitParams::lambda_tilde`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawInit", into = "RawInit")]
pub struct InitParams {
    c_pt: f64,
    lambda_pt: f64,
    gamma_ft: f64,
}

#[derive(Serialize, Deserialize)]
struct RawInit {
    c_pt: f64,
    lambda_pt: f64,
    gamma_ft: f64,
}

impl TryFrom<RawInit> for InitParams {
    type Error = Error;
    fn try_from(r: RawInit) -> Result<Self> {
        InitParams::new(r.c_pt, r.lambda_pt, r.gamma_ft)
    }
}

impl From<InitParams> for RawInit {
    fn from(p: InitParams) -> Self {
        RawInit {
            c_pt: p.c_pt,
            lambda_pt: p.lambda_pt,
            gamma_ft: p.gamma_ft,
        }
    }
}

impl InitParams {
    pub fn new(c_pt: f64, lambda_pt: f64, gamma_ft: f64) -> Result<Self> {
        if !(c_pt.is_finite() && c_pt > 0.0) {
            return Err(Error::domain("InitParams", format!("c_pt must be > 0, got {c_pt}")));
        }
        if !(-1.0..=1.0).contains(&lambda_pt) {
            return Err(Error::domain(
                "InitParams",
                format!("lambda_pt must lie in [-1, 1], got {lambda_pt}"),
            ));
        }
        if !(gamma_ft.is_finite() && gamma_ft >= 0.0) {
            return Err(Error::domain(
                "InitParams",
                format!("gamma_ft must be >= 0, got {gamma_ft}"),
            ));
        }
        Ok(InitParams {
            c_pt,
            lambda_pt,
            gamma_ft,
        })
    }

    /// Builds the parameters from the unnormalized relative scale
    /// `lambda_tilde = lambda_pt * c_pt`.
    pub fn from_lambda_tilde(c_pt: f64, lambda_tilde: f64, gamma_ft: f64) -> Result<Self> {
        if !(c_pt.is_finite() && c_pt > 0.0) {
            return Err(Error::domain("InitParams", format!("c_pt must be > 0, got {c_pt}")));
        }
        Self::new(c_pt, lambda_tilde / c_pt, gamma_ft)
    }

    pub fn c_pt(&self) -> f64 {
        self.c_pt
    }

    pub fn lambda_pt(&self) -> f64 {
        self.lambda_pt
    }

    pub fn gamma_ft(&self) -> f64 {
        self.gamma_ft
    }

    pub fn lambda_tilde(&self) -> f64 {
        self.lambda_pt * self.c_pt
    }

    /// `lambda_tilde + c_pt = c_pt (1 + lambda_pt)`, never negative.
    pub fn hidden_scale(&self) -> f64 {
        self.c_pt * (1.0 + self.lambda_pt)
    }

    pub fn with_c_pt(self, c_pt: f64) -> Result<Self> {
        Self::new(c_pt, self.lambda_pt, self.gamma_ft)
    }

    pub fn with_lambda_pt(self, lambda_pt: f64) -> Result<Self> {
        Self::new(self.c_pt, lambda_pt, self.gamma_ft)
    }

    pub fn with_gamma_ft(self, gamma_ft: f64) -> Result<Self> {
        Self::new(self.c_pt, self.lambda_pt, gamma_ft)
    }
}

/// A per-coordinate penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Penalty {
    /// `q_k(z)`, interpolating between ℓ1 (`k -> 0`) and ℓ2 (`k -> inf`).
    Qk { k: f64 },
    /// `mu * z^2`.
    Quadratic { mu: f64 },
}

impl Penalty {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Penalty::Qk { k } if !(k.is_finite() && k > 0.0) => {
                Err(Error::domain("Penalty", format!("k must be > 0, got {k}")))
            }
            Penalty::Quadratic { mu } if !(mu.is_finite() && mu > 0.0) => {
                Err(Error::domain("Penalty", format!("mu must be > 0, got {mu}")))
            }
            _ => Ok(()),
        }
    }

    pub fn value(&self, z: f64) -> Result<f64> {
        match *self {
            Penalty::Qk { k } => q_penalty(z, k),
            Penalty::Quadratic { mu } => Ok(mu * z * z),
        }
    }

    pub fn deriv1(&self, z: f64) -> Result<f64> {
        match *self {
            Penalty::Qk { k } => q_deriv1(z, k),
            Penalty::Quadratic { mu } => Ok(2.0 * mu * z),
        }
    }

    pub fn deriv2(&self, z: f64) -> Result<f64> {
        match *self {
            Penalty::Qk { k } => q_deriv2(z, k),
            Penalty::Quadratic { mu } => Ok(2.0 * mu),
        }
    }
}

impl std::fmt::Display for Penalty {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Penalty::Qk { k } => write!(f, "Qk(k={k:e})"),
            Penalty::Quadratic { mu } => write!(f, "Quadratic(mu={mu:e})"),
        }
    }
}

/// A penalty together with the probability of the coordinate group it applies to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PenaltyAtom {
    pub penalty: Penalty,
    pub pi: f64,
}

/// Learning-regime metrics of one coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeMetrics {
    pub ell_order: f64,
    pub pd: f64,
    pub kappa: f64,
}

/// `asinh` through `ln(x + sqrt(1 + x^2))`, with a series near zero and an
/// asymptotic form where `x^2` would overflow.
pub fn asinh_stable(x: f64) -> f64 {
    let a = x.abs();
    let r = if a < 1e-4 {
        let a2 = a * a;
        a * (1.0 - a2 / 6.0 + 3.0 * a2 * a2 / 40.0)
    } else if a > 1e8 {
        (2.0 * a).ln() + 1.0 / (4.0 * a * a)
    } else {
        (a + (1.0 + a * a).sqrt()).ln()
    };
    r.copysign(x)
}

/// `phi(z) = 1 - sqrt(1 + z^2) + z asinh(z)`.
pub fn phi(z: f64) -> f64 {
    let a = z.abs();
    if a < 1e-3 {
        let a2 = a * a;
        a2 * (0.5 - a2 / 24.0 + a2 * a2 / 80.0)
    } else {
        // 1 - sqrt(1+a^2) == -a^2 / (1 + sqrt(1+a^2))
        a * asinh_stable(a) - a * (a / (1.0 + 1.0f64.hypot(a)))
    }
}

fn check_qk_args(op: &'static str, z: f64, k: f64) -> Result<()> {
    if !z.is_finite() {
        return Err(Error::domain(op, format!("z must be finite, got {z}")));
    }
    if !(k.is_finite() && k > 0.0) {
        return Err(Error::domain(op, format!("k must be > 0, got {k}")));
    }
    Ok(())
}

/// `q_k(z) = (sqrt(k)/4) phi(2z/sqrt(k))`.
pub fn q_penalty(z: f64, k: f64) -> Result<f64> {
    check_qk_args("q_penalty", z, k)?;
    let sk = k.sqrt();
    Ok(0.25 * sk * phi(2.0 * z / sk))
}

/// `q_k'(z) = asinh(2z/sqrt(k)) / 2`.
pub fn q_deriv1(z: f64, k: f64) -> Result<f64> {
    check_qk_args("q_deriv1", z, k)?;
    Ok(0.5 * asinh_stable(2.0 * z / k.sqrt()))
}

/// `q_k''(z) = 1 / sqrt(k + 4 z^2)`.
pub fn q_deriv2(z: f64, k: f64) -> Result<f64> {
    check_qk_args("q_deriv2", z, k)?;
    Ok(1.0 / k.sqrt().hypot(2.0 * z))
}

fn check_beta(op: &'static str, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(op, format!("{name} must be finite, got {v}")))
    }
}

/// Square root of [`k_law`]: `2 c_pt (1 + lambda_pt)(1 + sqrt(1 + (beta_pt/c_pt)^2)) + gamma_ft^2`.
pub fn sqrt_k_law(init: &InitParams, beta_pt: f64) -> Result<f64> {
    check_beta("k_law", "beta_pt", beta_pt)?;
    let a = 2.0 * init.hidden_scale();
    let g2 = init.gamma_ft * init.gamma_ft;
    if a == 0.0 && g2 == 0.0 {
        return Err(Error::DegeneratePenalty);
    }
    let s = beta_pt / init.c_pt;
    Ok(a * (1.0 + 1.0f64.hypot(s)) + g2)
}

/// Per-coordinate penalty parameter of fine-tuning given the pretrained coefficient.
pub fn k_law(init: &InitParams, beta_pt: f64) -> Result<f64> {
    let r = sqrt_k_law(init, beta_pt)?;
    Ok(r * r)
}

/// `zeta asinh(zeta) / phi(zeta)`, the log-log slope of `phi`.
pub fn ell_order_of_zeta(zeta: f64) -> f64 {
    let a = zeta.abs();
    if a == 0.0 {
        return 2.0;
    }
    a * asinh_stable(a) / phi(a)
}

/// `d log k / d log beta_pt`.
pub fn kappa(init: &InitParams, beta_pt: f64) -> Result<f64> {
    let sqrt_k = sqrt_k_law(init, beta_pt)?;
    let a = 2.0 * init.hidden_scale();
    let s = beta_pt / init.c_pt;
    let b = 1.0f64.hypot(s);
    // s^2 / sqrt(1+s^2), written to avoid overflowing s^2
    let s2_over_b = s.abs() * (s.abs() / b);
    Ok(2.0 * a * s2_over_b / sqrt_k)
}

fn metrics_from(init: &InitParams, beta_pt: f64, beta_ft: f64) -> Result<RegimeMetrics> {
    let k = k_law(init, beta_pt)?;
    let kappa = kappa(init, beta_pt)?;
    let ell_order = ell_order_of_zeta(2.0 * beta_ft / k.sqrt());
    Ok(RegimeMetrics {
        ell_order,
        pd: 0.5 * (1.0 - ell_order) * kappa,
        kappa,
    })
}

/// Closed-form ℓ-order, PD and κ. `beta_ft = 0` is rejected; see
/// [`regime_metrics_with_limit`].
pub fn regime_metrics(init: &InitParams, beta_pt: f64, beta_ft: f64) -> Result<RegimeMetrics> {
    check_beta("regime_metrics", "beta_pt", beta_pt)?;
    check_beta("regime_metrics", "beta_ft", beta_ft)?;
    if beta_ft == 0.0 {
        return Err(Error::domain(
            "regime_metrics",
            "beta_ft = 0: the log-derivative is undefined; use regime_metrics_with_limit",
        ));
    }
    metrics_from(init, beta_pt, beta_ft)
}

/// As [`regime_metrics`], but `beta_ft = 0` takes the limit value ℓ-order = 2.
pub fn regime_metrics_with_limit(
    init: &InitParams,
    beta_pt: f64,
    beta_ft: f64,
) -> Result<RegimeMetrics> {
    check_beta("regime_metrics", "beta_pt", beta_pt)?;
    check_beta("regime_metrics", "beta_ft", beta_ft)?;
    metrics_from(init, beta_pt, beta_ft)
}

/// Pretraining dependence from a central difference of `k` in `beta_pt`,
/// chained with `d log q / d log k = 1/2 - beta_ft q'(beta_ft) / (2 q(beta_ft))`.
pub fn pd_numeric(init: &InitParams, beta_pt: f64, beta_ft: f64, eps: f64) -> Result<f64> {
    check_beta("pd_numeric", "beta_pt", beta_pt)?;
    check_beta("pd_numeric", "beta_ft", beta_ft)?;
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::domain("pd_numeric", format!("eps must be > 0, got {eps}")));
    }
    if beta_pt == 0.0 {
        return Err(Error::domain("pd_numeric", "beta_pt must be nonzero"));
    }
    if beta_ft == 0.0 {
        return Err(Error::domain("pd_numeric", "beta_ft must be nonzero"));
    }
    let k = k_law(init, beta_pt)?;
    let dk = (k_law(init, beta_pt + eps)? - k_law(init, beta_pt - eps)?) / (2.0 * eps);
    let dlogk = beta_pt / k * dk;
    let q = q_penalty(beta_ft, k)?;
    let dq = q_deriv1(beta_ft, k)?;
    let dlogq_dlogk = 0.5 - 0.5 * beta_ft * dq / q;
    Ok(dlogq_dlogk * dlogk)
}

/// Initialization parameter varied along a phase-portrait axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitField {
    CPt,
    LambdaPt,
    GammaFt,
}

impl InitField {
    pub fn apply(self, init: InitParams, value: f64) -> Result<InitParams> {
        match self {
            InitField::CPt => init.with_c_pt(value),
            InitField::LambdaPt => init.with_lambda_pt(value),
            InitField::GammaFt => init.with_gamma_ft(value),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InitField::CPt => "c_pt",
            InitField::LambdaPt => "lambda_pt",
            InitField::GammaFt => "gamma_ft",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub field: InitField,
    pub values: Vec<f64>,
}

impl GridAxis {
    pub fn new(field: InitField, values: Vec<f64>) -> Self {
        GridAxis { field, values }
    }

    /// `count` log-spaced values from `min` to `max` inclusive.
    pub fn log_spaced(field: InitField, min: f64, max: f64, count: usize) -> Result<Self> {
        Ok(GridAxis {
            field,
            values: geometric_grid(min, max, count)?,
        })
    }
}

pub(crate) fn geometric_grid(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if !(min > 0.0 && max >= min && min.is_finite() && max.is_finite()) || count == 0 {
        return Err(Error::domain(
            "geometric_grid",
            format!("need 0 < min <= max and count >= 1, got [{min}, {max}] x {count}"),
        ));
    }
    if count == 1 {
        return Ok(vec![min]);
    }
    let (lmin, lmax) = (min.ln(), max.ln());
    Ok((0..count)
        .map(|i| {
            if i == count - 1 {
                max
            } else {
                (lmin + (lmax - lmin) * i as f64 / (count - 1) as f64).exp()
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum PortraitCell {
    Metrics(RegimeMetrics),
    Flagged(String),
}

impl PortraitCell {
    pub fn metrics(&self) -> Option<&RegimeMetrics> {
        match self {
            PortraitCell::Metrics(m) => Some(m),
            PortraitCell::Flagged(_) => None,
        }
    }
}

/// Row-major matrix of regime metrics over two initialization axes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhasePortrait {
    pub rows: GridAxis,
    pub cols: GridAxis,
    pub cells: Vec<PortraitCell>,
}

impl PhasePortrait {
    pub fn cell(&self, row: usize, col: usize) -> &PortraitCell {
        &self.cells[row * self.cols.values.len() + col]
    }
}

/// Evaluates [`regime_metrics_with_limit`] on every grid cell. Invalid cells are
/// flagged rather than aborting the portrait.
pub fn phase_portrait(
    base: &InitParams,
    rows: &GridAxis,
    cols: &GridAxis,
    beta_pt: f64,
    beta_ft: f64,
) -> PhasePortrait {
    let mut cells = Vec::with_capacity(rows.values.len() * cols.values.len());
    for &rv in &rows.values {
        for &cv in &cols.values {
            let cell = rows
                .field
                .apply(*base, rv)
                .and_then(|p| cols.field.apply(p, cv))
                .and_then(|p| regime_metrics_with_limit(&p, beta_pt, beta_ft));
            cells.push(match cell {
                Ok(m) => PortraitCell::Metrics(m),
                Err(e) => PortraitCell::Flagged(e.to_string()),
            });
        }
    }
    PhasePortrait {
        rows: rows.clone(),
        cols: cols.clone(),
        cells,
    }
}
