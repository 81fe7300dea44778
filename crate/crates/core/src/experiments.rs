//! Config-driven rate experiments.
//!
//! A run walks the scenario's grid, writes one row per grid point to
//! `rows.csv` and a `summary.json` holding the resolved config, the SHA-256
//! of the rows file, the log-log fit and the verdict. Every row carries the
//! scenario, the predicted value and the tolerance, so [`report_dir`] can
//! re-derive the verdict from `rows.csv` alone.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decomposition::{
    anderson_gap, estimate_decomposition, reverse_efron_stein_bound, DesignSource, EfronSteinCheck,
    EfronSteinConstants, GroundTruth,
};
use crate::error::{Error, Result};
use crate::geometry::{
    check_failure_budget, check_inductive_bias, complexity_ratios, dyadic_profile, predicted_delta_bound,
    CovariateRegime, RangeTag, DEFAULT_MULTISTARTS,
};
use crate::norms::{lp_norm, NormSpec};
use crate::rng::{sample_design, sample_noise, streams, DesignSpec, Distribution, NoiseKind, Scaling, StreamKey};
use crate::solvers::{MinNormSolver, SolverOptions};
use crate::stats::{self, MeanEstimate};

pub const ROWS_FILE: &str = "rows.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const FIXED_NOISE_FILE: &str = "fixed_noise.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// T2 against d at fixed (n, p).
    T2Rate,
    /// T1 against n at fixed (d, p).
    T1Rate,
    /// E‖ŵ‖_∞·√d against d for pure noise.
    LinfProfile,
    /// Var_X(‖ŵ(X, ξ)‖)/(E‖ŵ‖)² against d for one fixed ξ per grid point.
    VarianceDecay,
    /// Anderson gap ratio against d.
    AndersonScan,
    /// Aggregated δ_k‖w_k‖₂ per dyadic k against the predicted envelope.
    DyadicDiagnostic,
    /// Complexity ratios over the (n, d) grid.
    ComplexityScan,
    /// Inductive bias ratios against d/n.
    InductiveBiasScan,
}

impl Scenario {
    pub const ALL: [Scenario; 8] = [
        Scenario::T2Rate,
        Scenario::T1Rate,
        Scenario::LinfProfile,
        Scenario::VarianceDecay,
        Scenario::AndersonScan,
        Scenario::DyadicDiagnostic,
        Scenario::ComplexityScan,
        Scenario::InductiveBiasScan,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::T2Rate => "t2_rate",
            Scenario::T1Rate => "t1_rate",
            Scenario::LinfProfile => "linf_profile",
            Scenario::VarianceDecay => "variance_decay",
            Scenario::AndersonScan => "anderson_scan",
            Scenario::DyadicDiagnostic => "dyadic_diagnostic",
            Scenario::ComplexityScan => "complexity_scan",
            Scenario::InductiveBiasScan => "inductive_bias_scan",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown scenario {name:?}")))
    }

    /// Predicted log-log slope of the estimate against the grid value.
    pub fn predicted_slope(self, p: f64) -> Option<f64> {
        match self {
            Scenario::T2Rate | Scenario::VarianceDecay => Some(-1.0),
            Scenario::T1Rate => Some(-p),
            Scenario::LinfProfile | Scenario::AndersonScan => Some(0.0),
            Scenario::DyadicDiagnostic => Some(0.5),
            Scenario::ComplexityScan | Scenario::InductiveBiasScan => None,
        }
    }

    /// Default tolerance of the verdict. Its meaning depends on the scenario:
    /// a slope band, a growth factor per 4× in d, a max/min band, an envelope
    /// factor, or a number of standard errors.
    pub fn default_tolerance(self) -> Option<f64> {
        match self {
            Scenario::T2Rate => Some(0.2),
            Scenario::T1Rate | Scenario::VarianceDecay => Some(0.3),
            Scenario::LinfProfile => Some(2.0),
            Scenario::AndersonScan => Some(3.0),
            Scenario::DyadicDiagnostic => Some(10.0),
            Scenario::ComplexityScan => Some(3.0),
            Scenario::InductiveBiasScan => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    #[serde(default = "gaussian")]
    pub distribution: Distribution,
    #[serde(default)]
    pub scaling: Scaling,
}

fn gaussian() -> Distribution {
    Distribution::Gaussian
}

impl Default for DesignConfig {
    fn default() -> Self {
        Self { distribution: Distribution::Gaussian, scaling: Scaling::Raw }
    }
}

impl DesignConfig {
    pub fn spec(&self, n: usize, d: usize) -> DesignSpec {
        DesignSpec::new(n, d, self.distribution, self.scaling)
    }

    pub fn regime(&self) -> CovariateRegime {
        match self.distribution {
            Distribution::Gaussian => CovariateRegime::Gaussian,
            _ => CovariateRegime::Subgaussian,
        }
    }
}

/// Sparse ground truth; indices are zero-based.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthConfig {
    pub support: Vec<usize>,
    pub values: Vec<f64>,
}

impl Default for TruthConfig {
    fn default() -> Self {
        Self { support: vec![0], values: vec![1.0] }
    }
}

impl TruthConfig {
    pub fn ground_truth(&self, norm: &NormSpec) -> Result<GroundTruth> {
        GroundTruth::sparse(norm.dimension, &self.support, &self.values, norm)
    }

    pub fn vector(&self, d: usize) -> Result<DVector<f64>> {
        if self.support.len() != self.values.len() {
            return Err(Error::DimensionMismatch { expected: self.support.len(), found: self.values.len() });
        }
        let mut w = DVector::zeros(d);
        for (&i, &v) in self.support.iter().zip(&self.values) {
            if i >= d {
                return Err(Error::OutOfRange { index: i, max: d.saturating_sub(1) });
            }
            w[i] = v;
        }
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct McConfig {
    #[serde(default = "default_replicates")]
    pub outer: usize,
    #[serde(default = "default_replicates")]
    pub inner: usize,
}

fn default_replicates() -> usize {
    50
}

impl Default for McConfig {
    fn default() -> Self {
        Self { outer: default_replicates(), inner: default_replicates() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConstants {
    /// Verdict tolerance; `None` resolves to [`Scenario::default_tolerance`].
    #[serde(default)]
    pub tolerance: Option<f64>,
    #[serde(default)]
    pub efron_stein: EfronSteinConstants,
    #[serde(default = "default_multistarts")]
    pub multistarts: usize,
}

fn default_multistarts() -> usize {
    DEFAULT_MULTISTARTS
}

impl Default for ScenarioConstants {
    fn default() -> Self {
        Self { tolerance: None, efron_stein: EfronSteinConstants::default(), multistarts: DEFAULT_MULTISTARTS }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scenario: Scenario,
    pub p: f64,
    #[serde(default)]
    pub d_grid: Vec<usize>,
    #[serde(default)]
    pub n_grid: Vec<usize>,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default = "NoiseKind::standard")]
    pub noise: NoiseKind,
    #[serde(default)]
    pub truth: TruthConfig,
    #[serde(default)]
    pub mc: McConfig,
    #[serde(default)]
    pub solver: SolverOptions,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Rayon worker threads; `None` uses the global pool. Never affects rows.
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub constants: ScenarioConstants,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("mni-output")
}

impl ExperimentConfig {
    /// A config with every optional field at its default.
    pub fn new(scenario: Scenario, p: f64, d_grid: Vec<usize>, n_grid: Vec<usize>) -> Self {
        Self {
            scenario,
            p,
            d_grid,
            n_grid,
            design: DesignConfig::default(),
            noise: NoiseKind::standard(),
            truth: TruthConfig::default(),
            mc: McConfig::default(),
            solver: SolverOptions::default(),
            seed: 0,
            output_dir: default_output_dir(),
            workers: None,
            constants: ScenarioConstants::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self = serde_json::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Defaults materialized: solver homotopy steps and the verdict tolerance.
    pub fn resolved(&self) -> Self {
        let mut out = self.clone();
        out.solver = self.solver.resolved(self.p);
        out.constants.tolerance = self.constants.tolerance.or(self.scenario.default_tolerance());
        out
    }

    pub fn norm(&self, d: usize) -> Result<NormSpec> {
        NormSpec::lp(self.p, d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p > 1.0 && self.p <= 2.0) {
            return Err(Error::Config(format!("p must lie in (1, 2], got {}", self.p)));
        }
        self.noise.validate()?;
        self.solver.validate()?;
        if self.mc.outer < 2 || self.mc.inner < 2 {
            return Err(Error::Config("mc.outer and mc.inner must be >= 2".into()));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        if let Distribution::UniformBounded { gamma } = self.design.distribution {
            if !(gamma > 0.0 && gamma.is_finite()) {
                return Err(Error::Config(format!("uniform_bounded requires gamma > 0, got {gamma}")));
            }
        }
        if self.truth.support.len() != self.truth.values.len() {
            return Err(Error::Config("truth.support and truth.values differ in length".into()));
        }
        let (d, n) = (self.d_grid.len(), self.n_grid.len());
        let need = |ok: bool, what: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{} needs {what}", self.scenario.name())))
            }
        };
        match self.scenario {
            Scenario::T2Rate | Scenario::VarianceDecay => need(n == 1 && d >= 3, "one n and at least 3 d values")?,
            Scenario::T1Rate => need(d == 1 && n >= 3, "one d and at least 3 n values")?,
            Scenario::LinfProfile => need(n == 1 && d >= 2, "one n and at least 2 d values")?,
            Scenario::InductiveBiasScan => need(n == 1 && d >= 1, "one n and a nonempty d grid")?,
            Scenario::AndersonScan => need(d >= 1, "a nonempty d grid")?,
            Scenario::DyadicDiagnostic => need(n == 1 && d == 1, "exactly one n and one d")?,
            Scenario::ComplexityScan => need(n >= 1 && d >= 1, "nonempty n and d grids")?,
        }
        if self.d_grid.iter().chain(&self.n_grid).any(|&v| v == 0) {
            return Err(Error::Config("grid values must be >= 1".into()));
        }
        if self.scenario != Scenario::AndersonScan {
            let n_max = self.n_grid.iter().copied().max().unwrap_or(0);
            let d_min = self.d_grid.iter().copied().min().unwrap_or(0);
            if self.scenario != Scenario::ComplexityScan && n_max > d_min {
                return Err(Error::Config(format!("need n <= d, got n={n_max} and d={d_min}")));
            }
        }
        Ok(())
    }
}

/// d ≥ 16·n·ln d, the default overparameterization regime.
pub fn in_regime(n: usize, d: usize) -> bool {
    d as f64 >= 16.0 * n as f64 * (d as f64).ln()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Num(f64),
    Text(String),
    Empty,
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Num(v) => format!("{v}"),
            Cell::Text(s) => s.clone(),
            Cell::Empty => String::new(),
        }
    }

    fn parse(raw: &str) -> Self {
        if raw.is_empty() {
            Cell::Empty
        } else if let Ok(v) = raw.parse::<f64>() {
            Cell::Num(v)
        } else {
            Cell::Text(raw.to_string())
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Num(v) => Some(*v),
            _ => None,
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Num(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Num(v as f64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Num(if v { 1.0 } else { 0.0 })
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<Option<f64>> for Cell {
    fn from(v: Option<f64>) -> Self {
        v.map_or(Cell::Empty, Cell::Num)
    }
}

const COMMON_COLUMNS: [&str; 10] = [
    "scenario",
    "grid_value",
    "estimate",
    "stderr",
    "replicates",
    "seed",
    "predicted",
    "tolerance",
    "failures",
    "in_regime",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub scenario: Scenario,
    pub grid_value: f64,
    pub estimate: f64,
    pub stderr: f64,
    pub replicates: usize,
    pub seed: u64,
    /// Per-row prediction: a bound, a reference value, or empty.
    pub predicted: Option<f64>,
    pub tolerance: Option<f64>,
    pub failures: usize,
    pub in_regime: bool,
    /// Scenario-specific columns in header order.
    pub extra: Vec<(String, Cell)>,
}

impl Row {
    pub fn get(&self, column: &str) -> Option<&Cell> {
        self.extra.iter().find(|(k, _)| k == column).map(|(_, v)| v)
    }

    pub fn get_f64(&self, column: &str) -> Option<f64> {
        self.get(column).and_then(Cell::as_f64)
    }
}

/// Serializes rows with a header. Columns after the common ones follow the
/// first row's extras; all rows of a run share them.
pub fn rows_to_csv(rows: &[Row]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = COMMON_COLUMNS.iter().map(|s| s.to_string()).collect();
    if let Some(first) = rows.first() {
        header.extend(first.extra.iter().map(|(k, _)| k.clone()));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.scenario.name().to_string(),
            Cell::from(r.grid_value).render(),
            Cell::from(r.estimate).render(),
            Cell::from(r.stderr).render(),
            r.replicates.to_string(),
            r.seed.to_string(),
            Cell::from(r.predicted).render(),
            Cell::from(r.tolerance).render(),
            r.failures.to_string(),
            Cell::from(r.in_regime).render(),
        ];
        rec.extend(r.extra.iter().map(|(_, v)| v.render()));
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn rows_from_csv(bytes: &[u8]) -> Result<Vec<Row>> {
    let mut r = csv::Reader::from_reader(bytes);
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header.len() < COMMON_COLUMNS.len() || header[..COMMON_COLUMNS.len()] != COMMON_COLUMNS {
        return Err(Error::Config(format!("rows header must start with {}", COMMON_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let num = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("column {} is not numeric: {:?}", header[i], &rec[i])))
        };
        let opt = |i: usize| -> Result<Option<f64>> {
            if rec[i].is_empty() {
                Ok(None)
            } else {
                num(i).map(Some)
            }
        };
        let int = |i: usize| -> Result<u64> {
            rec[i]
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("column {} is not an integer: {:?}", header[i], &rec[i])))
        };
        rows.push(Row {
            scenario: Scenario::from_name(&rec[0])?,
            grid_value: num(1)?,
            estimate: num(2)?,
            stderr: num(3)?,
            replicates: int(4)? as usize,
            seed: int(5)?,
            predicted: opt(6)?,
            tolerance: opt(7)?,
            failures: int(8)? as usize,
            in_regime: num(9)? != 0.0,
            extra: header[COMMON_COLUMNS.len()..]
                .iter()
                .zip(rec.iter().skip(COMMON_COLUMNS.len()))
                .map(|(k, v)| (k.clone(), Cell::parse(v)))
                .collect(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitPoint {
    pub x: f64,
    pub y: f64,
    /// Weight in log space, typically 1/stderr(log y)². `None` means 1.
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogLogFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// Weighted least squares of log y on log x.
pub fn fit_loglog_slope(points: &[FitPoint]) -> Result<LogLogFit> {
    if points.len() < 3 {
        return Err(Error::Config(format!("slope fitting needs >= 3 rows, got {}", points.len())));
    }
    for pt in points {
        if !(pt.x > 0.0 && pt.y > 0.0 && pt.x.is_finite() && pt.y.is_finite()) {
            return Err(Error::Config(format!("log-log fit needs positive finite values, got ({}, {})", pt.x, pt.y)));
        }
        if let Some(w) = pt.weight {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("fit weights must be positive and finite, got {w}")));
            }
        }
    }
    let lx: Vec<f64> = points.iter().map(|pt| pt.x.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|pt| pt.y.ln()).collect();
    let w: Vec<f64> = points.iter().map(|pt| pt.weight.unwrap_or(1.0)).collect();
    let sw: f64 = w.iter().sum();
    let mx = w.iter().zip(&lx).map(|(w, x)| w * x).sum::<f64>() / sw;
    let my = w.iter().zip(&ly).map(|(w, y)| w * y).sum::<f64>() / sw;
    let sxx: f64 = w.iter().zip(&lx).map(|(w, x)| w * (x - mx).powi(2)).sum();
    let sxy: f64 = (0..points.len()).map(|i| w[i] * (lx[i] - mx) * (ly[i] - my)).sum();
    if !(sxx > 0.0) {
        return Err(Error::Config("log-log fit needs at least two distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = (0..points.len()).map(|i| w[i] * (ly[i] - intercept - slope * lx[i]).powi(2)).sum();
    let ss_tot: f64 = w.iter().zip(&ly).map(|(w, y)| w * (y - my).powi(2)).sum();
    let scale = ly.iter().map(|y| y.abs()).fold(1.0, f64::max);
    let r_squared = if ss_tot <= 1e-24 * scale * scale * sw { 1.0 } else { (1.0 - ss_res / ss_tot).clamp(0.0, 1.0) };
    Ok(LogLogFit { slope, intercept, r_squared })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// No quantitative prediction to test.
    Descriptive,
    /// The run stopped early; rows are partial.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub scenario: Scenario,
    pub rows: Vec<Row>,
    pub fit: Option<LogLogFit>,
    pub predicted_slope: Option<f64>,
    pub verdict: Verdict,
    /// Why the verdict was reached, one line per failed check.
    pub notes: Vec<String>,
}

fn fit_rows(rows: &[Row]) -> Option<LogLogFit> {
    let weighted = rows.iter().all(|r| r.stderr > 0.0 && r.estimate > 0.0);
    let points: Vec<FitPoint> = rows
        .iter()
        .map(|r| FitPoint { x: r.grid_value, y: r.estimate, weight: weighted.then(|| (r.estimate / r.stderr).powi(2)) })
        .collect();
    fit_loglog_slope(&points).ok()
}

/// Fit and verdict from rows alone.
pub fn derive_report(rows: Vec<Row>) -> Result<RateReport> {
    let first = rows.first().ok_or_else(|| Error::Config("no rows to report on".into()))?;
    let scenario = first.scenario;
    if rows.iter().any(|r| r.scenario != scenario) {
        return Err(Error::Config("rows mix several scenarios".into()));
    }
    let tolerance = first.tolerance;
    let mut notes = Vec::new();
    let (fit, predicted_slope) = match scenario {
        Scenario::DyadicDiagnostic => (fit_rows(&rows), Some(0.5)),
        Scenario::ComplexityScan => (None, None),
        _ => (fit_rows(&rows), first.predicted),
    };
    let verdict = match (scenario, tolerance) {
        (_, None) => Verdict::Descriptive,
        (Scenario::T2Rate | Scenario::T1Rate | Scenario::VarianceDecay, Some(tol)) => {
            match (fit, predicted_slope) {
                (Some(f), Some(pred)) if (f.slope - pred).abs() <= tol => {}
                (Some(f), Some(pred)) => notes.push(format!("slope {:.4} outside {pred} ± {tol}", f.slope)),
                _ => notes.push("slope could not be fitted (needs >= 3 positive estimates)".into()),
            }
            verdict_of(&notes)
        }
        (Scenario::LinfProfile, Some(tol)) => {
            for pair in rows.windows(2) {
                let steps = (pair[1].grid_value / pair[0].grid_value).ln() / 4f64.ln();
                let growth = (pair[1].estimate / pair[0].estimate).powf(1.0 / steps);
                if !(growth <= tol) {
                    notes.push(format!(
                        "growth {growth:.4} per 4x from d={} to d={} exceeds {tol}",
                        pair[0].grid_value, pair[1].grid_value
                    ));
                }
            }
            verdict_of(&notes)
        }
        (Scenario::AndersonScan, Some(tol)) => {
            for r in &rows {
                let (g, se) = (r.get_f64("gap_mean").unwrap_or(f64::NAN), r.get_f64("gap_stderr").unwrap_or(f64::NAN));
                if !(g >= -3.0 * se) {
                    notes.push(format!("gap {g} below -3·{se} at d={}", r.grid_value));
                }
            }
            let lo = rows.iter().map(|r| r.estimate).fold(f64::INFINITY, f64::min);
            let hi = rows.iter().map(|r| r.estimate).fold(f64::NEG_INFINITY, f64::max);
            if !(lo > 0.0 && hi / lo <= tol) {
                notes.push(format!("ratio range [{lo}, {hi}] exceeds a factor {tol}"));
            }
            verdict_of(&notes)
        }
        (Scenario::DyadicDiagnostic, Some(tol)) => {
            for r in &rows {
                match r.predicted {
                    Some(b) if r.estimate <= tol * b => {}
                    b => notes.push(format!("k={}: {} exceeds {tol}·{b:?}", r.grid_value, r.estimate)),
                }
            }
            verdict_of(&notes)
        }
        (Scenario::ComplexityScan, Some(tol)) => {
            for r in &rows {
                let bound = r.predicted.unwrap_or(1.0);
                if !(r.estimate >= bound - tol * r.stderr) {
                    notes.push(format!("ratio {} below {bound} at d={}", r.estimate, r.grid_value));
                }
            }
            verdict_of(&notes)
        }
        (Scenario::InductiveBiasScan, Some(_)) => Verdict::Descriptive,
    };
    Ok(RateReport { scenario, rows, fit, predicted_slope, verdict, notes })
}

fn verdict_of(notes: &[String]) -> Verdict {
    if notes.is_empty() {
        Verdict::Pass
    } else {
        Verdict::Fail
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config: ExperimentConfig,
    pub rows_digest: String,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub r_squared: Option<f64>,
    pub predicted_slope: Option<f64>,
    pub verdict: Verdict,
    pub wall_time_seconds: f64,
    /// Grid points outside d ≥ 16·n·ln d.
    pub regime_warnings: Vec<String>,
    pub notes: Vec<String>,
    pub error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        let _ = write!(out, "{b:02x}");
    }
    out
}

/// Runs the scenario, writes `rows.csv` and `summary.json` into the output
/// directory and returns the report. On an estimator failure the rows
/// completed so far are written with verdict `aborted` and the error is
/// returned.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RateReport> {
    config.validate()?;
    let resolved = config.resolved();
    fs::create_dir_all(&resolved.output_dir)?;
    let start = Instant::now();
    let mut rows = Vec::new();
    let mut fixed_noise = Vec::new();
    let outcome = match resolved.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))?
            .install(|| compute_rows(&resolved, &mut rows, &mut fixed_noise)),
        None => compute_rows(&resolved, &mut rows, &mut fixed_noise),
    };
    let bytes = rows_to_csv(&rows)?;
    let dir = &resolved.output_dir;
    fs::write(dir.join(ROWS_FILE), &bytes)?;
    if !fixed_noise.is_empty() {
        write_fixed_noise(&dir.join(FIXED_NOISE_FILE), &fixed_noise)?;
    }
    let regime_warnings: Vec<String> = rows
        .iter()
        .filter(|r| !r.in_regime)
        .map(|r| format!("grid_value {} violates d >= 16·n·ln d", r.grid_value))
        .collect();
    let (report, error) = match outcome {
        Ok(()) => (derive_report(rows)?, None),
        Err(e) => {
            let report = RateReport {
                scenario: resolved.scenario,
                rows,
                fit: None,
                predicted_slope: resolved.scenario.predicted_slope(resolved.p),
                verdict: Verdict::Aborted,
                notes: vec![e.to_string()],
            };
            (report, Some(e))
        }
    };
    let summary = Summary {
        config: resolved.clone(),
        rows_digest: sha256_hex(&bytes),
        slope: report.fit.map(|f| f.slope),
        intercept: report.fit.map(|f| f.intercept),
        r_squared: report.fit.map(|f| f.r_squared),
        predicted_slope: report.predicted_slope,
        verdict: report.verdict,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        regime_warnings,
        notes: report.notes.clone(),
        error: error.as_ref().map(|e| e.to_string()),
    };
    fs::write(dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
    match error {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

fn write_fixed_noise(path: &Path, vectors: &[(f64, DVector<f64>)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().flexible(true).from_path(path)?;
    for (grid_value, xi) in vectors {
        let mut rec = vec![format!("{grid_value}")];
        rec.extend(xi.iter().map(|v| format!("{v}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Result of re-deriving a run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectoryReport {
    pub report: RateReport,
    pub rows_digest: String,
    /// Whether the digest and verdict stored in summary.json agree, when it exists.
    pub digest_matches: Option<bool>,
    pub verdict_matches: Option<bool>,
}

pub fn report_dir(dir: &Path) -> Result<DirectoryReport> {
    let bytes = fs::read(dir.join(ROWS_FILE))?;
    let rows_digest = sha256_hex(&bytes);
    let report = derive_report(rows_from_csv(&bytes)?)?;
    let summary_path = dir.join(SUMMARY_FILE);
    let (digest_matches, verdict_matches) = if summary_path.exists() {
        let summary: Summary = serde_json::from_str(&fs::read_to_string(summary_path)?)?;
        (Some(summary.rows_digest == rows_digest), Some(summary.verdict == report.verdict))
    } else {
        (None, None)
    };
    Ok(DirectoryReport { report, rows_digest, digest_matches, verdict_matches })
}

/// Base key of grid point `index`. Estimators switch stream ids internally,
/// so grid points are separated through the replicate index.
fn grid_key(seed: u64, index: usize) -> StreamKey {
    StreamKey::new(seed, 0, index as u64)
}

fn compute_rows(cfg: &ExperimentConfig, rows: &mut Vec<Row>, fixed_noise: &mut Vec<(f64, DVector<f64>)>) -> Result<()> {
    let tol = cfg.constants.tolerance;
    let base = |grid_value: f64, est: MeanEstimate, replicates: usize, failures: usize, n: usize, d: usize| Row {
        scenario: cfg.scenario,
        grid_value,
        estimate: est.mean,
        stderr: est.stderr,
        replicates,
        seed: cfg.seed,
        predicted: cfg.scenario.predicted_slope(cfg.p),
        tolerance: tol,
        failures,
        in_regime: in_regime(n, d),
        extra: Vec::new(),
    };
    let replicates = cfg.mc.outer * cfg.mc.inner;
    match cfg.scenario {
        Scenario::T2Rate | Scenario::T1Rate => {
            let pairs: Vec<(usize, usize)> = if cfg.scenario == Scenario::T2Rate {
                cfg.d_grid.iter().map(|&d| (cfg.n_grid[0], d)).collect()
            } else {
                cfg.n_grid.iter().map(|&n| (n, cfg.d_grid[0])).collect()
            };
            for (gi, &(n, d)) in pairs.iter().enumerate() {
                let norm = cfg.norm(d)?;
                let truth = cfg.truth.ground_truth(&norm)?;
                let source = DesignSource::Random(cfg.design.spec(n, d));
                let key = grid_key(cfg.seed, gi);
                let rep = estimate_decomposition(
                    &source,
                    &norm,
                    &truth,
                    cfg.noise,
                    cfg.mc.outer,
                    cfg.mc.inner,
                    key,
                    &cfg.solver,
                )?;
                let (grid_value, est) =
                    if cfg.scenario == Scenario::T2Rate { (d as f64, rep.t2) } else { (n as f64, rep.t1) };
                let mut row = base(grid_value, est, rep.outer_samples * rep.inner_samples, rep.failures, n, d);
                row.extra = vec![
                    ("n".into(), n.into()),
                    ("d".into(), d.into()),
                    ("e1".into(), rep.e1.mean.into()),
                    ("e1_stderr".into(), rep.e1.stderr.into()),
                    ("e2".into(), rep.e2.mean.into()),
                    ("e2_stderr".into(), rep.e2.stderr.into()),
                    ("t1".into(), rep.t1.mean.into()),
                    ("t1_stderr".into(), rep.t1.stderr.into()),
                    ("t2".into(), rep.t2.mean.into()),
                    ("t2_stderr".into(), rep.t2.stderr.into()),
                    ("mse".into(), rep.mse.mean.into()),
                    ("mse_stderr".into(), rep.mse.stderr.into()),
                    ("identity_residual".into(), rep.consistency_residual.into()),
                    ("identity_stderr".into(), rep.consistency_stderr.into()),
                ];
                if cfg.scenario == Scenario::T2Rate {
                    // σ²·n/(d − n − 1), the exact ℓ2 value for Gaussian designs.
                    let closed = (cfg.p == 2.0 && cfg.design.distribution == Distribution::Gaussian && d > n + 1)
                        .then(|| cfg.noise.variance() * n as f64 / (d - n - 1) as f64);
                    row.extra.push(("l2_closed_form".into(), closed.into()));
                    let es = &cfg.constants.efron_stein;
                    // An undefined Ψ (too many infeasible balls) leaves the columns empty.
                    let names = ["es_m_n", "es_radius", "es_psi", "es_rhs", "es_threshold", "es_satisfied"];
                    let values: [Cell; 6] = match reverse_efron_stein_bound(
                        &source,
                        &norm,
                        cfg.noise,
                        cfg.mc.outer,
                        cfg.mc.inner,
                        es,
                        key,
                        &cfg.solver,
                    ) {
                        Ok(bound) => {
                            let check = EfronSteinCheck::new(rep.t2, bound, es);
                            [
                                check.bound.m_n.mean.into(),
                                check.bound.radius.into(),
                                check.bound.psi.median.into(),
                                check.bound.rhs_bound.into(),
                                (es.tolerance_factor * check.bound.rhs_bound).into(),
                                check.satisfied.into(),
                            ]
                        }
                        Err(Error::Estimator(_)) => std::array::from_fn(|_| Cell::Empty),
                        Err(e) => return Err(e),
                    };
                    row.extra.extend(names.into_iter().map(String::from).zip(values));
                }
                rows.push(row);
            }
        }
        Scenario::LinfProfile => {
            let n = cfg.n_grid[0];
            for (gi, &d) in cfg.d_grid.iter().enumerate() {
                let norm = cfg.norm(d)?;
                let key = grid_key(cfg.seed, gi);
                let scale = (d as f64).sqrt();
                let (per_outer, failures) =
                    noise_solutions(cfg, n, d, &norm, key, |w| scale * w.iter().fold(0.0f64, |m, v| m.max(v.abs())))?;
                // Clustered by design: the outer means are independent.
                let means: Vec<f64> = per_outer.iter().filter(|v| !v.is_empty()).map(|v| stats::mean(v)).collect();
                let est = stats::mean_estimate(&means);
                let mut row = base(d as f64, est, replicates - failures, failures, n, d);
                row.extra = vec![
                    ("n".into(), n.into()),
                    ("d".into(), d.into()),
                    ("linf_raw".into(), (est.mean / scale).into()),
                ];
                rows.push(row);
            }
        }
        Scenario::VarianceDecay => {
            let n = cfg.n_grid[0];
            for (gi, &d) in cfg.d_grid.iter().enumerate() {
                let norm = cfg.norm(d)?;
                let key = grid_key(cfg.seed, gi);
                let xi = sample_noise(cfg.noise, n, key.with_stream(streams::FIXED_NOISE))?;
                let spec = cfg.design.spec(n, d);
                let values: Vec<Result<Option<f64>>> = (0..replicates as u64)
                    .into_par_iter()
                    .map(|o| {
                        let x = sample_design(spec, key.with_stream(streams::DESIGN).child(o))?;
                        let sol = MinNormSolver::new(&x, norm, cfg.solver)?.solve(&xi)?;
                        Ok(sol.is_converged().then_some(sol.norm_value))
                    })
                    .collect();
                let mut kept = Vec::with_capacity(replicates);
                for v in values {
                    kept.extend(v?);
                }
                let failures = replicates - kept.len();
                check_failure_budget(failures, replicates)?;
                let est = normalized_variance(&kept)?;
                let mut row = base(d as f64, est, kept.len(), failures, n, d);
                row.extra = vec![
                    ("n".into(), n.into()),
                    ("d".into(), d.into()),
                    ("norm_mean".into(), stats::mean(&kept).into()),
                    ("xi_l2".into(), xi.norm().into()),
                ];
                fixed_noise.push((d as f64, xi));
                rows.push(row);
            }
        }
        Scenario::AndersonScan => {
            let n = cfg.n_grid.first().copied().unwrap_or(1);
            for (gi, &d) in cfg.d_grid.iter().enumerate() {
                let norm = cfg.norm(d)?;
                let x = cfg.truth.vector(d)?;
                let gap = anderson_gap(&norm, &x, replicates, grid_key(cfg.seed, gi))?;
                let est = MeanEstimate { mean: gap.ratio_to_xnorm2, stderr: gap.ratio_stderr };
                let mut row = base(d as f64, est, replicates, 0, n, d);
                row.extra = vec![
                    ("d".into(), d.into()),
                    ("gap_mean".into(), gap.gap.mean.into()),
                    ("gap_stderr".into(), gap.gap.stderr.into()),
                    ("x_norm".into(), lp_norm(x.as_slice(), cfg.p).into()),
                ];
                rows.push(row);
            }
        }
        Scenario::DyadicDiagnostic => {
            let (n, d) = (cfg.n_grid[0], cfg.d_grid[0]);
            let norm = cfg.norm(d)?;
            let key = grid_key(cfg.seed, 0);
            let scale = (d as f64 / n as f64).sqrt();
            let (per_outer, failures) = noise_solutions(cfg, n, d, &norm, key, |w| w.clone())?;
            let solutions: Vec<DVector<f64>> = per_outer.into_iter().flatten().collect();
            let profiles =
                solutions.par_iter().map(|w| dyadic_profile(&(w * scale), cfg.p, n)).collect::<Result<Vec<_>>>()?;
            let first = profiles.first().ok_or_else(|| Error::Estimator("no converged solutions".into()))?;
            for (bi, block) in first.dyadic_blocks().enumerate() {
                let l2: Vec<f64> = profiles.iter().map(|pr| pr.blocks[bi].l2_of_block).collect();
                let deltas: Vec<f64> = profiles.iter().map(|pr| pr.blocks[bi].delta_k).collect();
                let est = stats::mean_estimate(&l2);
                let bound = predicted_delta_bound(d, block.k, cfg.p, cfg.design.regime())?;
                let mut row = base(block.k as f64, est, l2.len(), failures, n, d);
                row.predicted = Some(bound);
                row.extra = vec![
                    ("n".into(), n.into()),
                    ("d".into(), d.into()),
                    ("range".into(), range_name(block.range_tag).into()),
                    ("delta_mean".into(), stats::mean(&deltas).into()),
                    ("ratio_to_bound".into(), (est.mean / bound).into()),
                ];
                rows.push(row);
            }
        }
        Scenario::ComplexityScan => {
            let mut gi = 0;
            for &n in &cfg.n_grid {
                for &d in cfg.d_grid.iter().filter(|&&d| d >= n) {
                    let norm = cfg.norm(d)?;
                    let key = grid_key(cfg.seed, gi);
                    gi += 1;
                    let x = sample_design(cfg.design.spec(n, d), key.with_stream(streams::DESIGN))?;
                    let rep = complexity_ratios(&x, &norm, replicates, cfg.constants.multistarts, key, &cfg.solver)?;
                    let est = MeanEstimate { mean: rep.r_mm_star_spherical, stderr: rep.r_mm_star_spherical_stderr };
                    let mut row = base(d as f64, est, rep.samples_used, rep.failures, n, d);
                    row.predicted = Some(1.0);
                    row.extra = vec![
                        ("n".into(), n.into()),
                        ("d".into(), d.into()),
                        ("m_mean".into(), rep.m_mean.into()),
                        ("m_stderr".into(), rep.m_stderr.into()),
                        ("mstar_mean".into(), rep.mstar_mean.into()),
                        ("mstar_stderr".into(), rep.mstar_stderr.into()),
                        ("inradius".into(), rep.inradius.into()),
                        ("gaussian_complexity".into(), rep.gaussian_complexity.into()),
                        ("rademacher_complexity".into(), rep.rademacher_complexity.into()),
                        ("r_mm_star".into(), rep.r_mm_star.into()),
                        ("r_mm_star_stderr".into(), rep.r_mm_star_stderr.into()),
                        ("r_bm_star".into(), rep.r_bm_star.into()),
                        ("r_bm_star_stderr".into(), rep.r_bm_star_stderr.into()),
                    ];
                    rows.push(row);
                }
            }
            if rows.is_empty() {
                return Err(Error::Config("complexity_scan grid has no pair with n <= d".into()));
            }
        }
        Scenario::InductiveBiasScan => {
            let n = cfg.n_grid[0];
            for (gi, &d) in cfg.d_grid.iter().enumerate() {
                let norm = cfg.norm(d)?;
                let key = grid_key(cfg.seed, gi);
                let x = sample_design(cfg.design.spec(n, d), key.with_stream(streams::DESIGN))?;
                let w_star = cfg.truth.vector(d)?;
                let bias = check_inductive_bias(&x, &norm, &w_star, replicates, key, &cfg.solver)?;
                let est = MeanEstimate { mean: bias.ratio, stderr: bias.noise_norm_stderr / bias.signal_norm };
                let mut row = base(d as f64 / n as f64, est, replicates, 0, n, d);
                row.predicted = None;
                row.extra = vec![
                    ("n".into(), n.into()),
                    ("d".into(), d.into()),
                    ("noise_norm_mean".into(), bias.noise_norm_mean.into()),
                    ("noise_norm_stderr".into(), bias.noise_norm_stderr.into()),
                    ("signal_norm".into(), bias.signal_norm.into()),
                ];
                rows.push(row);
            }
        }
    }
    Ok(())
}

fn range_name(tag: RangeTag) -> &'static str {
    match tag {
        RangeTag::R1 => "R1",
        RangeTag::R2 => "R2",
        RangeTag::Head => "head",
    }
}

/// Interpolators of pure noise: `outer` designs with `inner` noise draws
/// each, mapped through `f`. Returns values grouped by design and the
/// number of unconverged solves.
fn noise_solutions<T: Send>(
    cfg: &ExperimentConfig,
    n: usize,
    d: usize,
    norm: &NormSpec,
    key: StreamKey,
    f: impl Fn(&DVector<f64>) -> T + Sync,
) -> Result<(Vec<Vec<T>>, usize)> {
    let spec = cfg.design.spec(n, d);
    let results: Vec<Result<(Vec<T>, usize)>> = (0..cfg.mc.outer as u64)
        .into_par_iter()
        .map(|o| {
            let x = sample_design(spec, key.with_stream(streams::DESIGN).child(o))?;
            let solver = MinNormSolver::new(&x, *norm, cfg.solver)?;
            let mut kept = Vec::with_capacity(cfg.mc.inner);
            for i in 0..cfg.mc.inner as u64 {
                let xi = sample_noise(cfg.noise, n, key.with_stream(streams::NOISE).child(o).child(i))?;
                let sol = solver.solve(&xi)?;
                if sol.is_converged() {
                    kept.push(f(&sol.weights));
                }
            }
            let failures = cfg.mc.inner - kept.len();
            Ok((kept, failures))
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.mc.outer);
    let mut failures = 0;
    for r in results {
        let (v, f) = r?;
        failures += f;
        out.push(v);
    }
    check_failure_budget(failures, cfg.mc.outer * cfg.mc.inner)?;
    Ok((out, failures))
}

/// s²/x̄² with a delta-method standard error from the third and fourth
/// central moments.
pub fn normalized_variance(xs: &[f64]) -> Result<MeanEstimate> {
    if xs.len() < 4 {
        return Err(Error::Estimator(format!("normalized variance needs >= 4 values, got {}", xs.len())));
    }
    let m = xs.len() as f64;
    let mean = stats::mean(xs);
    if !(mean.abs() > 0.0) {
        return Err(Error::Estimator("normalized variance of a zero-mean sample".into()));
    }
    let s2 = stats::sample_variance(xs);
    let central = |k: i32| stats::mean(&xs.iter().map(|x| (x - mean).powi(k)).collect::<Vec<_>>());
    let (m3, m4) = (central(3), central(4));
    let ratio = s2 / (mean * mean);
    let (ds2, dmean) = (1.0 / (mean * mean), -2.0 * s2 / mean.powi(3));
    let var = ds2 * ds2 * (m4 - s2 * s2) / m + dmean * dmean * s2 / m + 2.0 * ds2 * dmean * m3 / m;
    Ok(MeanEstimate { mean: ratio, stderr: var.max(0.0).sqrt() })
}
