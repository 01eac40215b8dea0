//! Experiment configuration: the TOML schema, its validation, and the
//! expansion of a baseline plus sweeps into concrete config points.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diagnet::TrainConfig;
use crate::error::{Error, Result};
use crate::penalty::{geometric_grid, InitField, InitParams};
use crate::replica::SolverConfig;
use crate::ridge::{RidgeAtom, RidgeModel};
use crate::task::TaskSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    ReplicaCurve,
    EmpiricalCurve,
    PhasePortrait,
    RidgeCheck,
    Compare,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::ReplicaCurve => "replica-curve",
            Mode::EmpiricalCurve => "empirical-curve",
            Mode::PhasePortrait => "phase-portrait",
            Mode::RidgeCheck => "ridge-check",
            Mode::Compare => "compare",
        }
    }
}

/// `ptft` fine-tunes from the pretrained state; `single-task` trains one
/// sparse task from scratch, with its sparsity given as `task.rho_pt`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    #[default]
    Ptft,
    SingleTask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepMode {
    /// Baseline plus one-dimensional sweeps, one field at a time.
    #[default]
    OneAtATime,
    /// Full cross product of all sweep lists.
    Grid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Spacing {
    #[default]
    Log,
    Linear,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_pt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_pt: Option<f64>,
    /// Unnormalized relative scale `lambda_pt * c_pt`; exclusive with `lambda_pt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_tilde: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma_ft: Option<f64>,
}

/// Task parameters. The fine-tuning support is given either as
/// `(rho_ft, omega)` or as `(rho_sh, rho_new)`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_pt: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_ft: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub omega: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_sh: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho_new: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma0_sq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub a_pt: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitLists {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub c_pt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_pt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub lambda_tilde: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma_ft: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskLists {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_pt: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_ft: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub omega: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_sh: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho_new: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sigma0_sq: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub a_pt: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    #[serde(default)]
    pub mode: SweepMode,
    #[serde(default)]
    pub init: InitLists,
    #[serde(default)]
    pub task: TaskLists,
}

/// An explicit config point: the baseline with some fields replaced.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub task: TaskSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlphaGrid {
    /// Explicit values; when given, `count`, `min`, `max` and `spacing` are ignored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default = "default_alpha_count")]
    pub count: usize,
    #[serde(default = "default_alpha_min")]
    pub min: f64,
    #[serde(default = "default_alpha_max")]
    pub max: f64,
    #[serde(default)]
    pub spacing: Spacing,
}

fn default_alpha_count() -> usize {
    11
}
fn default_alpha_min() -> f64 {
    0.01
}
fn default_alpha_max() -> f64 {
    0.5
}

impl Default for AlphaGrid {
    fn default() -> Self {
        AlphaGrid {
            values: None,
            count: default_alpha_count(),
            min: default_alpha_min(),
            max: default_alpha_max(),
            spacing: Spacing::Log,
        }
    }
}

impl AlphaGrid {
    pub fn resolve(&self) -> Result<Vec<f64>> {
        let grid = match &self.values {
            Some(v) => v.clone(),
            None => {
                if self.count == 0 {
                    return Err(Error::config("alpha_grid.count", "alpha grid is empty"));
                }
                if !(self.min > 0.0 && self.max >= self.min && self.max.is_finite()) {
                    return Err(Error::config(
                        "alpha_grid.min",
                        format!("need 0 < min <= max, got [{}, {}]", self.min, self.max),
                    ));
                }
                match self.spacing {
                    Spacing::Log => geometric_grid(self.min, self.max, self.count)?,
                    Spacing::Linear if self.count == 1 => vec![self.min],
                    Spacing::Linear => (0..self.count)
                        .map(|i| self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64)
                        .collect(),
                }
            }
        };
        if grid.is_empty() {
            return Err(Error::config("alpha_grid.values", "alpha grid is empty"));
        }
        if grid.iter().any(|a| !(a.is_finite() && *a > 0.0)) {
            return Err(Error::config("alpha_grid.values", "alpha values must be positive and finite"));
        }
        if grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::config("alpha_grid.values", "alpha values must be strictly ascending"));
        }
        Ok(grid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSection {
    pub field: InitField,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub values: Option<Vec<f64>>,
    #[serde(default)]
    pub min: f64,
    #[serde(default)]
    pub max: f64,
    #[serde(default)]
    pub count: usize,
    #[serde(default)]
    pub spacing: Spacing,
}

impl AxisSection {
    pub fn resolve(&self, name: &str) -> Result<Vec<f64>> {
        let grid = AlphaGrid {
            values: self.values.clone(),
            count: self.count,
            min: self.min,
            max: self.max,
            spacing: self.spacing,
        };
        match (self.field, &self.values) {
            // lambda_pt axes may cross zero, so only explicit or linear grids make sense.
            (InitField::LambdaPt, None) => {
                if self.count == 0 || !(self.max >= self.min) {
                    return Err(Error::config(format!("portrait.{name}"), "empty or inverted axis"));
                }
                Ok((0..self.count)
                    .map(|i| {
                        if self.count == 1 {
                            self.min
                        } else {
                            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
                        }
                    })
                    .collect())
            }
            (_, Some(v)) if v.is_empty() => Err(Error::config(format!("portrait.{name}.values"), "axis is empty")),
            (_, Some(v)) => Ok(v.clone()),
            _ => grid
                .resolve()
                .map_err(|e| Error::config(format!("portrait.{name}"), e.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PortraitSection {
    pub rows: AxisSection,
    pub cols: AxisSection,
    pub beta_pt: f64,
    pub beta_ft: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RidgeSection {
    pub atoms: Vec<RidgeAtom>,
    pub gamma_aspect: f64,
    pub lambda_reg: f64,
    #[serde(default)]
    pub sigma0_sq: f64,
    #[serde(default = "default_ridge_n")]
    pub n: usize,
    #[serde(default = "default_ridge_trials")]
    pub trials: usize,
}

fn default_ridge_n() -> usize {
    4000
}
fn default_ridge_trials() -> usize {
    20
}

impl RidgeSection {
    pub fn model(&self) -> RidgeModel {
        RidgeModel {
            atoms: self.atoms.clone(),
            gamma_aspect: self.gamma_aspect,
            lambda_reg: self.lambda_reg,
            sigma0_sq: self.sigma0_sq,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSection {
    pub replica: String,
    pub empirical: String,
}

fn default_d() -> usize {
    2000
}
fn default_seeds() -> Vec<u64> {
    vec![6, 7, 8, 9, 10]
}
fn default_chunks() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub mode: Mode,
    #[serde(default)]
    pub protocol: Protocol,
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_path: Option<String>,
    /// Contiguous alpha chunks per replica curve.
    #[serde(default = "default_chunks")]
    pub chunks: usize,
    #[serde(default)]
    pub init: InitSection,
    #[serde(default)]
    pub task: TaskSection,
    #[serde(default)]
    pub sweep: SweepSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub points: Vec<PointSection>,
    #[serde(default)]
    pub alpha_grid: AlphaGrid,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub portrait: Option<PortraitSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ridge: Option<RidgeSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub compare: Option<CompareSection>,
}

/// Scalar fields that sweeps and points can set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Field {
    CPt,
    LambdaPt,
    LambdaTilde,
    GammaFt,
    RhoPt,
    RhoFt,
    Omega,
    RhoSh,
    RhoNew,
    Sigma0Sq,
    APt,
}

impl Field {
    pub const ALL: [Field; 11] = [
        Field::CPt,
        Field::LambdaPt,
        Field::LambdaTilde,
        Field::GammaFt,
        Field::RhoPt,
        Field::RhoFt,
        Field::Omega,
        Field::RhoSh,
        Field::RhoNew,
        Field::Sigma0Sq,
        Field::APt,
    ];

    pub fn path(self) -> &'static str {
        match self {
            Field::CPt => "init.c_pt",
            Field::LambdaPt => "init.lambda_pt",
            Field::LambdaTilde => "init.lambda_tilde",
            Field::GammaFt => "init.gamma_ft",
            Field::RhoPt => "task.rho_pt",
            Field::RhoFt => "task.rho_ft",
            Field::Omega => "task.omega",
            Field::RhoSh => "task.rho_sh",
            Field::RhoNew => "task.rho_new",
            Field::Sigma0Sq => "task.sigma0_sq",
            Field::APt => "task.a_pt",
        }
    }
}

/// Flat view of the init and task sections; `None` means unset.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Params([Option<f64>; 11]);

impl Params {
    pub fn from_sections(init: &InitSection, task: &TaskSection) -> Self {
        let mut p = Params::default();
        let pairs = [
            (Field::CPt, init.c_pt),
            (Field::LambdaPt, init.lambda_pt),
            (Field::LambdaTilde, init.lambda_tilde),
            (Field::GammaFt, init.gamma_ft),
            (Field::RhoPt, task.rho_pt),
            (Field::RhoFt, task.rho_ft),
            (Field::Omega, task.omega),
            (Field::RhoSh, task.rho_sh),
            (Field::RhoNew, task.rho_new),
            (Field::Sigma0Sq, task.sigma0_sq),
            (Field::APt, task.a_pt),
        ];
        for (f, v) in pairs {
            p.0[f as usize] = v;
        }
        p
    }

    pub fn get(&self, f: Field) -> Option<f64> {
        self.0[f as usize]
    }

    fn raw_set(&mut self, f: Field, v: Option<f64>) {
        self.0[f as usize] = v;
    }

    /// Sets one field, translating between the two equivalent ways of giving
    /// `lambda` and the fine-tuning support so that an override never leaves
    /// both forms set.
    pub fn set(&mut self, f: Field, v: f64) {
        match f {
            Field::LambdaPt => self.raw_set(Field::LambdaTilde, None),
            Field::LambdaTilde => self.raw_set(Field::LambdaPt, None),
            Field::Omega | Field::RhoFt => {
                if let (Some(sh), Some(new)) = (self.get(Field::RhoSh), self.get(Field::RhoNew)) {
                    let tot = sh + new;
                    self.raw_set(Field::RhoFt, Some(tot));
                    self.raw_set(Field::Omega, Some(if tot > 0.0 { sh / tot } else { 0.0 }));
                }
                self.raw_set(Field::RhoSh, None);
                self.raw_set(Field::RhoNew, None);
            }
            Field::RhoSh | Field::RhoNew => {
                if let (Some(tot), Some(om)) = (self.get(Field::RhoFt), self.get(Field::Omega)) {
                    self.raw_set(Field::RhoSh, Some(om * tot));
                    self.raw_set(Field::RhoNew, Some((1.0 - om) * tot));
                }
                self.raw_set(Field::RhoFt, None);
                self.raw_set(Field::Omega, None);
            }
            _ => {}
        }
        self.raw_set(f, Some(v));
    }

    fn apply_sections(&mut self, init: &InitSection, task: &TaskSection) {
        let over = Params::from_sections(init, task);
        for f in Field::ALL {
            if let Some(v) = over.get(f) {
                self.set(f, v);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "kebab-case")]
pub enum TaskKind {
    Ptft(TaskSpec),
    SingleTask { rho: f64, sigma0_sq: f64 },
}

impl TaskKind {
    /// `(rho_pt, rho_sh, rho_new)` as written to output rows; for a single
    /// task the sparsity goes in `rho_pt` and the others are NaN.
    pub fn rho_columns(&self) -> (f64, f64, f64) {
        match self {
            TaskKind::Ptft(s) => (s.rho_pt(), s.rho_ft_shared(), s.rho_ft_new()),
            TaskKind::SingleTask { rho, .. } => (*rho, f64::NAN, f64::NAN),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigPoint {
    pub index: usize,
    pub label: String,
    pub init: InitParams,
    pub task: TaskKind,
}

impl ConfigPoint {
    /// Whether an output row with these parameter columns belongs to this point.
    pub fn matches(&self, c_pt: f64, lambda_pt: f64, gamma_ft: f64, rho: (f64, f64, f64)) -> bool {
        let same = |a: f64, b: f64| a.to_bits() == b.to_bits() || (a.is_nan() && b.is_nan());
        let own = self.task.rho_columns();
        same(self.init.c_pt(), c_pt)
            && same(self.init.lambda_pt(), lambda_pt)
            && same(self.init.gamma_ft(), gamma_ft)
            && same(own.0, rho.0)
            && same(own.1, rho.1)
            && same(own.2, rho.2)
    }
}

fn resolve_point(p: &Params, protocol: Protocol) -> Result<(InitParams, TaskKind)> {
    let c = p.get(Field::CPt).unwrap_or(1e-3);
    let gamma = p.get(Field::GammaFt).unwrap_or(0.0);
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::config("init.c_pt", format!("must be > 0, got {c}")));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::config("init.gamma_ft", format!("must be >= 0, got {gamma}")));
    }
    let init = match (p.get(Field::LambdaPt), p.get(Field::LambdaTilde)) {
        (Some(_), Some(_)) => {
            return Err(Error::config("init.lambda_tilde", "set either lambda_pt or lambda_tilde, not both"))
        }
        (_, Some(lt)) => InitParams::from_lambda_tilde(c, lt, gamma)
            .map_err(|_| Error::config("init.lambda_tilde", format!("violates -c_pt <= lambda_tilde <= c_pt (lambda_tilde={lt}, c_pt={c})")))?,
        (l, None) => {
            let l = l.unwrap_or(0.0);
            InitParams::new(c, l, gamma)
                .map_err(|_| Error::config("init.lambda_pt", format!("violates -1 <= lambda_pt <= 1, got {l}")))?
        }
    };
    let rho_pt = p.get(Field::RhoPt).unwrap_or(0.1);
    let s2 = p.get(Field::Sigma0Sq).unwrap_or(0.0);
    if !(s2.is_finite() && s2 >= 0.0) {
        return Err(Error::config("task.sigma0_sq", format!("must be >= 0, got {s2}")));
    }
    if !(rho_pt > 0.0 && rho_pt <= 1.0) {
        return Err(Error::config("task.rho_pt", format!("violates 0 < rho_pt <= 1, got {rho_pt}")));
    }
    let task = match protocol {
        Protocol::SingleTask => {
            for f in [Field::RhoFt, Field::Omega, Field::RhoSh, Field::RhoNew, Field::APt] {
                if p.get(f).is_some() {
                    return Err(Error::config(f.path(), "not used by the single-task protocol (its sparsity is task.rho_pt)"));
                }
            }
            TaskKind::SingleTask { rho: rho_pt, sigma0_sq: s2 }
        }
        Protocol::Ptft => {
            let (sh, new) = match (p.get(Field::RhoFt), p.get(Field::Omega), p.get(Field::RhoSh), p.get(Field::RhoNew)) {
                (Some(tot), Some(om), None, None) => {
                    if !(0.0..=1.0).contains(&om) {
                        return Err(Error::config("task.omega", format!("violates 0 <= omega <= 1, got {om}")));
                    }
                    if !(tot > 0.0 && tot <= 1.0) {
                        return Err(Error::config("task.rho_ft", format!("violates 0 < rho_ft <= 1, got {tot}")));
                    }
                    (om * tot, (1.0 - om) * tot)
                }
                (None, None, Some(sh), Some(new)) => (sh, new),
                (None, None, _, _) => {
                    return Err(Error::config("task.rho_sh", "give both rho_sh and rho_new, or rho_ft and omega"))
                }
                _ => return Err(Error::config("task.omega", "give both rho_ft and omega, or rho_sh and rho_new")),
            };
            if !(sh >= 0.0) {
                return Err(Error::config("task.rho_sh", format!("violates rho_sh >= 0, got {sh}")));
            }
            if !(new >= 0.0) {
                return Err(Error::config("task.rho_new", format!("violates rho_new >= 0, got {new}")));
            }
            if sh > rho_pt * (1.0 + 1e-12) {
                return Err(Error::config(
                    "task.rho_sh",
                    format!("violates rho_sh <= rho_pt (rho_sh={sh}, rho_pt={rho_pt})"),
                ));
            }
            if new > (1.0 - rho_pt) * (1.0 + 1e-12) {
                return Err(Error::config(
                    "task.rho_new",
                    format!("violates rho_new <= 1 - rho_pt (rho_new={new}, rho_pt={rho_pt})"),
                ));
            }
            if sh + new <= 0.0 {
                return Err(Error::config("task.rho_new", "fine-tuning task has no active coordinates"));
            }
            let mut spec = TaskSpec::new(rho_pt, sh, new, s2).map_err(|e| Error::config("task", e.to_string()))?;
            if let Some(a) = p.get(Field::APt) {
                spec = spec
                    .with_a_pt(a)
                    .map_err(|_| Error::config("task.a_pt", format!("must be > 0, got {a}")))?;
            }
            TaskKind::Ptft(spec)
        }
    };
    Ok((init, task))
}

fn fmt_value(v: f64) -> String {
    format!("{v}")
}

impl ExperimentConfig {
    pub fn from_toml(source: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(source).map_err(|e| {
            let field = e
                .span()
                .map(|s| format!("line {}", line_of(source, s.start)))
                .unwrap_or_else(|| "config".into());
            Error::config(field, e.message().to_string())
        })?;
        Ok(cfg)
    }

    /// Canonical text: every default filled in, fixed key order.
    pub fn to_canonical_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("cannot serialize config: {e}")))
    }

    /// First 16 hex digits of the SHA-256 of the canonical text.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_canonical_toml()?.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }

    fn sweep_lists(&self) -> Vec<(Field, &Vec<f64>)> {
        let (i, t) = (&self.sweep.init, &self.sweep.task);
        vec![
            (Field::CPt, &i.c_pt),
            (Field::LambdaPt, &i.lambda_pt),
            (Field::LambdaTilde, &i.lambda_tilde),
            (Field::GammaFt, &i.gamma_ft),
            (Field::RhoPt, &t.rho_pt),
            (Field::RhoFt, &t.rho_ft),
            (Field::Omega, &t.omega),
            (Field::RhoSh, &t.rho_sh),
            (Field::RhoNew, &t.rho_new),
            (Field::Sigma0Sq, &t.sigma0_sq),
            (Field::APt, &t.a_pt),
        ]
    }

    /// Baseline, sweeps and explicit points, with duplicates removed.
    /// Sweep values equal to the baseline therefore never produce a second run.
    pub fn expand_points(&self) -> Result<Vec<ConfigPoint>> {
        let base = Params::from_sections(&self.init, &self.task);
        let mut raw: Vec<(String, Params)> = vec![("baseline".into(), base)];
        let lists: Vec<(Field, &Vec<f64>)> = self.sweep_lists().into_iter().filter(|(_, v)| !v.is_empty()).collect();
        match self.sweep.mode {
            SweepMode::OneAtATime => {
                for (f, values) in &lists {
                    for &v in values.iter() {
                        let mut p = base;
                        p.set(*f, v);
                        raw.push((format!("{}={}", f.path(), fmt_value(v)), p));
                    }
                }
            }
            SweepMode::Grid => {
                let mut acc: Vec<(String, Params)> = vec![(String::new(), base)];
                for (f, values) in &lists {
                    let mut next = Vec::with_capacity(acc.len() * values.len());
                    for (label, p) in &acc {
                        for &v in values.iter() {
                            let mut q = *p;
                            q.set(*f, v);
                            let sep = if label.is_empty() { "" } else { "," };
                            next.push((format!("{label}{sep}{}={}", f.path(), fmt_value(v)), q));
                        }
                    }
                    acc = next;
                }
                if !lists.is_empty() {
                    raw = acc;
                }
            }
        }
        for (i, pt) in self.points.iter().enumerate() {
            let mut p = base;
            p.apply_sections(&pt.init, &pt.task);
            raw.push((pt.label.clone().unwrap_or_else(|| format!("point-{i}")), p));
        }
        for (f, values) in &lists {
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("sweep.{}", f.path()), "values must be finite"));
            }
        }
        let mut out: Vec<ConfigPoint> = Vec::new();
        for (label, p) in raw {
            let (init, task) = resolve_point(&p, self.protocol)?;
            if let Some(q) = out.iter_mut().find(|q| q.init == init && q.task == task) {
                // an explicit point label beats the generated one
                if q.label == "baseline" {
                    q.label = label;
                }
                continue;
            }
            out.push(ConfigPoint {
                index: out.len(),
                label,
                init,
                task,
            });
        }
        Ok(out)
    }

    /// Schema and invariant checks that do not run anything.
    pub fn validate(&self) -> Result<ValidationReport> {
        if self.chunks == 0 {
            return Err(Error::config("chunks", "must be >= 1"));
        }
        let mut report = ValidationReport {
            mode: self.mode,
            points: 0,
            alphas: 0,
            seeds: 0,
            units: 0,
            rows: 0,
            cost: String::new(),
        };
        match self.mode {
            Mode::ReplicaCurve | Mode::EmpiricalCurve => {
                let points = self.expand_points()?;
                let alphas = self.alpha_grid.resolve()?;
                if self.seeds.is_empty() {
                    return Err(Error::config("seeds", "at least one seed is required"));
                }
                report.points = points.len();
                report.alphas = alphas.len();
                if self.mode == Mode::ReplicaCurve {
                    self.solver.validate()?;
                    let chunks = self.chunks.min(alphas.len());
                    report.seeds = 1;
                    report.units = points.len() * chunks;
                    report.rows = points.len() * alphas.len();
                    let evals = 2.0 * (points.len() * alphas.len()) as f64 * self.solver.mc_samples as f64;
                    report.cost = format!(
                        "{evals:.2e} prox evaluations per fixed-point iteration (forward and backward), at most {} iterations each",
                        self.solver.max_iter
                    );
                } else {
                    self.train.validate()?;
                    if self.d == 0 {
                        return Err(Error::config("d", "must be >= 1"));
                    }
                    for &a in &alphas {
                        crate::diagnet::sample_count(a, self.d).map_err(|e| Error::config("alpha_grid", e.to_string()))?;
                    }
                    report.seeds = self.seeds.len();
                    report.units = points.len() * alphas.len() * self.seeds.len();
                    report.rows = report.units;
                    let per_epoch: f64 = alphas
                        .iter()
                        .map(|a| 2.0 * (a * self.d as f64).round() * self.d as f64)
                        .sum::<f64>()
                        * (points.len() * self.seeds.len()) as f64;
                    report.cost = format!(
                        "{per_epoch:.2e} multiply-adds per epoch summed over runs, at most {} epochs each",
                        self.train.max_epochs
                    );
                }
            }
            Mode::PhasePortrait => {
                let p = self
                    .portrait
                    .as_ref()
                    .ok_or_else(|| Error::config("portrait", "phase-portrait mode needs a [portrait] table"))?;
                let r = p.rows.resolve("rows")?;
                let c = p.cols.resolve("cols")?;
                if p.rows.field == p.cols.field {
                    return Err(Error::config("portrait.cols.field", "rows and cols must vary different fields"));
                }
                if !(p.beta_pt.is_finite() && p.beta_ft.is_finite()) {
                    return Err(Error::config("portrait.beta_pt", "beta values must be finite"));
                }
                let points = self.expand_points()?;
                report.points = points.len();
                report.units = points.len();
                report.rows = points.len() * r.len() * c.len();
                report.cost = format!("{} penalty evaluations", report.rows);
            }
            Mode::RidgeCheck => {
                let r = self
                    .ridge
                    .as_ref()
                    .ok_or_else(|| Error::config("ridge", "ridge-check mode needs a [ridge] table"))?;
                r.model().validate().map_err(|e| Error::config("ridge", e.to_string()))?;
                if r.n == 0 || r.trials < 2 {
                    return Err(Error::config("ridge.trials", "need n >= 1 and trials >= 2"));
                }
                let m = (r.gamma_aspect * r.n as f64).round();
                report.units = r.trials;
                report.rows = 1;
                report.cost = format!("{:.2e} flops for {} Gram matrices", r.trials as f64 * m * m * r.n as f64, r.trials);
            }
            Mode::Compare => {
                let c = self
                    .compare
                    .as_ref()
                    .ok_or_else(|| Error::config("compare", "compare mode needs a [compare] table"))?;
                if c.replica.is_empty() || c.empirical.is_empty() {
                    return Err(Error::config("compare.replica", "both input paths are required"));
                }
                report.units = 1;
                report.cost = "one join".into();
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub mode: Mode,
    pub points: usize,
    pub alphas: usize,
    pub seeds: usize,
    /// Scheduling units: point x chunk for replica runs, point x alpha x seed
    /// for empirical runs.
    pub units: usize,
    pub rows: usize,
    pub cost: String,
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "mode:         {}", self.mode.as_str())?;
        writeln!(f, "config points: {}", self.points)?;
        writeln!(f, "alpha values:  {}", self.alphas)?;
        writeln!(f, "seeds:         {}", self.seeds)?;
        writeln!(f, "work units:    {}", self.units)?;
        writeln!(f, "output rows:   {}", self.rows)?;
        write!(f, "estimated cost: {}", self.cost)
    }
}

fn line_of(source: &str, offset: usize) -> usize {
    source[..offset.min(source.len())].matches('\n').count() + 1
}

/// Best-effort line number of a dotted field such as `task.rho_sh`: the
/// first assignment to the last key after the header of its table.
pub fn locate(source: &str, field: &str) -> Option<usize> {
    let (table, key) = match field.rsplit_once('.') {
        Some((t, k)) => (Some(t), k),
        None => (None, field),
    };
    let mut in_table = table.is_none();
    for (i, line) in source.lines().enumerate() {
        let t = line.trim();
        if t.starts_with('[') {
            let name = t.trim_matches(|c| c == '[' || c == ']').trim();
            in_table = table.is_none_or(|tb| name == tb || name.ends_with(&format!(".{tb}")));
            continue;
        }
        if in_table {
            if let Some((k, _)) = t.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

/// Formats a config error with a line reference when one can be found.
pub fn diagnose(source: &str, err: &Error) -> String {
    match err {
        Error::Config { field, message } if field.starts_with("line ") => format!("{field}: {message}"),
        Error::Config { field, message } => match locate(source, field) {
            Some(l) => format!("line {l}: `{field}`: {message}"),
            None => format!("`{field}`: {message}"),
        },
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
mode = "replica-curve"
[init]
c_pt = 1e-3
[task]
rho_pt = 0.1
rho_sh = 0.1
rho_new = 0.0
"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        assert_eq!(cfg.d, 2000);
        assert_eq!(cfg.seeds.len(), 5);
        assert_eq!(cfg.alpha_grid.resolve().unwrap().len(), 11);
        let pts = cfg.expand_points().unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].task.rho_columns(), (0.1, 0.1, 0.0));
    }

    #[test]
    fn canonical_text_round_trips() {
        let cfg = ExperimentConfig::from_toml(MINIMAL).unwrap();
        let text = cfg.to_canonical_toml().unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.hash().unwrap(), back.hash().unwrap());
        assert_eq!(cfg.hash().unwrap().len(), 16);
    }

    #[test]
    fn shared_rate_above_pretraining_rate_is_rejected() {
        let src = MINIMAL.replace("rho_sh = 0.1", "rho_sh = 0.2");
        let err = ExperimentConfig::from_toml(&src).unwrap().validate().unwrap_err();
        let msg = diagnose(&src, &err);
        assert!(msg.contains("rho_sh <= rho_pt"), "{msg}");
        assert!(msg.starts_with("line 7"), "{msg}");
    }

    #[test]
    fn empty_alpha_grid_is_rejected() {
        let src = format!("{MINIMAL}[alpha_grid]\ncount = 0\n");
        let err = ExperimentConfig::from_toml(&src).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "alpha_grid.count"));
        let src = format!("{MINIMAL}[alpha_grid]\nvalues = []\n");
        assert!(ExperimentConfig::from_toml(&src).unwrap().validate().is_err());
    }

    #[test]
    fn unknown_keys_report_a_line() {
        let src = MINIMAL.replace("c_pt = 1e-3", "c_pt = 1e-3\nbogus = 1");
        let err = ExperimentConfig::from_toml(&src).unwrap_err();
        let msg = diagnose(&src, &err);
        assert!(msg.starts_with("line 5"), "{msg}");
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn overlap_shorthand_expands() {
        let src = r#"
mode = "replica-curve"
[task]
rho_pt = 0.1
rho_ft = 0.1
omega = 0.5
"#;
        let pts = ExperimentConfig::from_toml(src).unwrap().expand_points().unwrap();
        let (_, sh, new) = pts[0].task.rho_columns();
        assert!((sh - 0.05).abs() < 1e-15 && (new - 0.05).abs() < 1e-15);
    }

    #[test]
    fn baseline_values_in_sweeps_are_not_rerun() {
        let src = r#"
mode = "replica-curve"
[init]
c_pt = 1e-3
lambda_pt = 0.0
[task]
rho_pt = 0.1
rho_ft = 0.1
omega = 0.5
[sweep.init]
c_pt = [1e-6, 1e-3, 1.0]
lambda_tilde = [0.0, 0.5e-3]
[sweep.task]
omega = [0.0, 0.5]
"#;
        let pts = ExperimentConfig::from_toml(src).unwrap().expand_points().unwrap();
        // baseline + 2 c_pt + 1 lambda_tilde + 1 omega
        assert_eq!(pts.len(), 5);
        assert!(pts.iter().any(|p| (p.init.lambda_pt() - 0.5).abs() < 1e-12));
    }

    #[test]
    fn grid_sweep_is_a_cross_product() {
        let src = r#"
mode = "replica-curve"
[task]
rho_pt = 0.1
rho_sh = 0.0
rho_new = 0.1
[sweep]
mode = "grid"
[sweep.init]
c_pt = [1e-6, 1e-3]
gamma_ft = [0.0, 1.0, 10.0]
"#;
        assert_eq!(ExperimentConfig::from_toml(src).unwrap().expand_points().unwrap().len(), 6);
    }

    #[test]
    fn point_overrides_switch_support_form() {
        let src = r#"
mode = "replica-curve"
[task]
rho_pt = 0.1
rho_ft = 0.1
omega = 1.0
[[points]]
label = "dense"
task = { rho_sh = 0.0, rho_new = 0.9 }
[[points]]
task = { rho_new = 0.05 }
"#;
        let pts = ExperimentConfig::from_toml(src).unwrap().expand_points().unwrap();
        assert_eq!(pts[1].label, "dense");
        assert_eq!(pts[1].task.rho_columns(), (0.1, 0.0, 0.9));
        let (_, sh, new) = pts[2].task.rho_columns();
        assert!((sh - 0.1).abs() < 1e-15 && new == 0.05);
    }

    #[test]
    fn lambda_forms_are_exclusive() {
        let src = MINIMAL.replace("c_pt = 1e-3", "c_pt = 1e-3\nlambda_pt = 0.1\nlambda_tilde = 1e-4");
        let err = ExperimentConfig::from_toml(&src).unwrap().validate().unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "init.lambda_tilde"));
    }

    #[test]
    fn single_task_uses_rho_pt() {
        let src = r#"
mode = "empirical-curve"
protocol = "single-task"
d = 100
[task]
rho_pt = 0.04
"#;
        let cfg = ExperimentConfig::from_toml(src).unwrap();
        let pts = cfg.expand_points().unwrap();
        assert!(matches!(pts[0].task, TaskKind::SingleTask { rho, .. } if rho == 0.04));
        let bad = format!("{src}omega = 1.0\n");
        assert!(ExperimentConfig::from_toml(&bad).unwrap().validate().is_err());
    }

    #[test]
    fn locate_finds_nested_keys() {
        let src = "mode = \"x\"\n[init]\nc_pt = 1\n[task]\nrho_pt = 2\nc_pt = 3\n";
        assert_eq!(locate(src, "task.rho_pt"), Some(5));
        assert_eq!(locate(src, "init.c_pt"), Some(3));
        assert_eq!(locate(src, "mode"), Some(1));
        assert_eq!(locate(src, "task.omega"), None);
    }
}
