//! Nested Monte Carlo estimates of the MSE decomposition
//! MSE = T1 + T2 = (E1 + E2) + T2, the degree-1 Hermite coefficients of the
//! noise-to-interpolator map, Ψ_n, and the reverse Efron–Stein and Anderson
//! diagnostics.
//!
//! The L2(P) norm of the isotropic linear model is the Euclidean norm, so all
//! error terms are squared ℓ2 distances in weight space.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{check_failure_budget, converged_values};
use crate::norms::{curvature_constants, lp_norm, NormSpec};
use crate::rng::{sample_design, sample_noise, standard_normal, streams, Design, DesignSpec, NoiseKind, StreamKey};
use crate::solvers::{min_l2_in_ball_prepared, MinNormSolver, MniSolution, PreparedDesign, SolveStatus, SolverOptions};
use crate::stats::{self, MeanEstimate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub w_star: DVector<f64>,
    pub sparsity: usize,
    pub p_norm: f64,
    pub l2_norm: f64,
}

impl GroundTruth {
    /// A signal whose norm and ℓ2 norm both lie in [0.5, 2].
    pub fn new(w_star: DVector<f64>, norm: &NormSpec) -> Result<Self> {
        let truth = Self::unchecked(w_star, norm)?;
        for (name, value) in [("norm", truth.p_norm), ("l2 norm", truth.l2_norm)] {
            if !(0.5..=2.0).contains(&value) {
                return Err(Error::Config(format!("ground truth {name} {value} outside [0.5, 2]")));
            }
        }
        Ok(truth)
    }

    /// A sparse signal from its support and values.
    pub fn sparse(d: usize, support: &[usize], values: &[f64], norm: &NormSpec) -> Result<Self> {
        if support.len() != values.len() {
            return Err(Error::DimensionMismatch { expected: support.len(), found: values.len() });
        }
        let mut w = DVector::zeros(d);
        for (&i, &v) in support.iter().zip(values) {
            if i >= d {
                return Err(Error::OutOfRange { index: i, max: d.saturating_sub(1) });
            }
            w[i] = v;
        }
        Self::new(w, norm)
    }

    /// The first coordinate vector, the default 1-sparse signal.
    pub fn e1(norm: &NormSpec) -> Result<Self> {
        Self::sparse(norm.dimension, &[0], &[1.0], norm)
    }

    /// The zero signal (pure-noise experiments). Exempt from the norm bounds.
    pub fn zero(d: usize) -> Self {
        Self { w_star: DVector::zeros(d), sparsity: 0, p_norm: 0.0, l2_norm: 0.0 }
    }

    fn unchecked(w_star: DVector<f64>, norm: &NormSpec) -> Result<Self> {
        if w_star.len() != norm.dimension {
            return Err(Error::DimensionMismatch { expected: norm.dimension, found: w_star.len() });
        }
        let sparsity = w_star.iter().filter(|&&v| v != 0.0).count();
        let p_norm = lp_norm(w_star.as_slice(), norm.exponent());
        let l2_norm = w_star.norm();
        Ok(Self { w_star, sparsity, p_norm, l2_norm })
    }

    pub fn dimension(&self) -> usize {
        self.w_star.len()
    }

    pub fn is_zero(&self) -> bool {
        self.sparsity == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalProjection {
    pub coefficient: f64,
    pub parallel: DVector<f64>,
    pub orthogonal: DVector<f64>,
}

/// Euclidean projection of w onto the line spanned by w_star.
pub fn project_onto_signal(w: &DVector<f64>, w_star: &DVector<f64>) -> Result<SignalProjection> {
    if w.len() != w_star.len() {
        return Err(Error::DimensionMismatch { expected: w_star.len(), found: w.len() });
    }
    let s2 = w_star.norm_squared();
    if s2 == 0.0 {
        return Err(Error::ZeroVector);
    }
    let coefficient = w.dot(w_star) / s2;
    let parallel = w_star * coefficient;
    let mut orthogonal = w - &parallel;
    // One Gram–Schmidt correction removes the rounding left along w_star.
    let leak = orthogonal.dot(w_star) / s2;
    orthogonal.axpy(-leak, w_star, 1.0);
    Ok(SignalProjection { coefficient, parallel, orthogonal })
}

/// Where the design of each outer replicate comes from.
#[derive(Debug, Clone)]
pub enum DesignSource {
    /// A fresh design per outer replicate.
    Random(DesignSpec),
    /// The same design for every outer replicate.
    Fixed(Design),
}

impl DesignSource {
    pub fn n(&self) -> usize {
        match self {
            Self::Random(spec) => spec.n,
            Self::Fixed(x) => x.n(),
        }
    }

    pub fn d(&self) -> usize {
        match self {
            Self::Random(spec) => spec.d,
            Self::Fixed(x) => x.d(),
        }
    }

    /// Design of outer replicate `outer`, keyed by `key.child(outer)` on the design stream.
    pub fn design(&self, key: StreamKey, outer: u64) -> Result<Design> {
        match self {
            Self::Random(spec) => sample_design(*spec, key.with_stream(streams::DESIGN).child(outer)),
            Self::Fixed(x) => Ok(x.clone()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub e1: MeanEstimate,
    pub e2: MeanEstimate,
    pub t1: MeanEstimate,
    pub t2: MeanEstimate,
    pub mse: MeanEstimate,
    pub outer_samples: usize,
    pub inner_samples: usize,
    pub failures: usize,
    /// |MSE − (T1 + T2)|.
    pub consistency_residual: f64,
    /// Standard error of MSE − (T1 + T2), from the per-outer differences.
    pub consistency_stderr: f64,
}

impl DecompositionReport {
    /// Whether the residual lies within `k` propagated standard errors.
    pub fn is_consistent(&self, k: f64) -> bool {
        let propagated = (self.mse.stderr.powi(2) + self.t1.stderr.powi(2) + self.t2.stderr.powi(2)).sqrt();
        self.consistency_residual <= k * propagated.max(self.consistency_stderr) + 1e-12 * self.mse.mean.abs()
    }
}

/// Per-outer unbiased estimates.
#[derive(Debug, Clone, Copy)]
struct OuterTerms {
    e1: f64,
    e2: f64,
    t2: f64,
    mse: f64,
}

/// Estimates for one design from the interpolators of its inner replicates.
///
/// The conditional mean m̂ is the inner average. Plug-in squared distances
/// of m̂ overstate their targets by the inner variance over the inner count,
/// split along and across w_star; both corrections are subtracted, so each
/// term is unbiased given X and MSE = E1 + E2 + T2 holds per replicate.
fn outer_terms(solutions: &[DVector<f64>], w_star: &DVector<f64>) -> OuterTerms {
    let m = solutions.len() as f64;
    let d = w_star.len();
    let mut mean = DVector::zeros(d);
    for w in solutions {
        mean += w;
    }
    mean /= m;
    let sq: Vec<f64> = solutions.iter().map(|w| (w - &mean).norm_squared()).collect();
    let t2 = stats::pairwise_sum(&sq) / (m - 1.0);
    let errs: Vec<f64> = solutions.iter().map(|w| (w - w_star).norm_squared()).collect();
    let mse = stats::mean(&errs);

    let s2 = w_star.norm_squared();
    if s2 == 0.0 {
        return OuterTerms { e1: 0.0, e2: mean.norm_squared() - t2 / m, t2, mse };
    }
    let s = s2.sqrt();
    let along: Vec<f64> = solutions.iter().map(|w| w.dot(w_star) / s).collect();
    let var_parallel = stats::sample_variance(&along);
    let var_orthogonal = t2 - var_parallel;
    let c = mean.dot(w_star) / s2;
    let e1_plug = (c - 1.0).powi(2) * s2;
    let e2_plug = (&mean - w_star * c).norm_squared();
    OuterTerms { e1: e1_plug - var_parallel / m, e2: e2_plug - var_orthogonal / m, t2, mse }
}

fn check_replicates(outer_m: usize, inner_m: usize) -> Result<()> {
    if outer_m < 2 || inner_m < 2 {
        return Err(Error::Config(format!("need outer_m >= 2 and inner_m >= 2, got {outer_m} and {inner_m}")));
    }
    Ok(())
}

/// Interpolators of Xw* + ξ_i for the inner replicates of one design.
/// Noise for (outer, inner) comes from `key.child(outer).child(inner)` on the noise stream.
#[allow(clippy::too_many_arguments)]
fn inner_solutions(
    x: &Design,
    norm: &NormSpec,
    truth: &GroundTruth,
    noise: NoiseKind,
    inner_m: usize,
    key: StreamKey,
    outer: u64,
    opts: &SolverOptions,
) -> Result<(Vec<DVector<f64>>, usize)> {
    let solver = MinNormSolver::new(x, *norm, *opts)?;
    let clean = &x.matrix * &truth.w_star;
    let noise_key = key.with_stream(streams::NOISE).child(outer);
    let mut kept = Vec::with_capacity(inner_m);
    for i in 0..inner_m as u64 {
        let xi = sample_noise(noise, x.n(), noise_key.child(i))?;
        let sol = solver.solve(&(&clean + xi))?;
        if sol.is_converged() {
            kept.push(sol.weights);
        }
    }
    let failures = inner_m - kept.len();
    Ok((kept, failures))
}

#[allow(clippy::too_many_arguments)]
pub fn estimate_decomposition(
    source: &DesignSource,
    norm: &NormSpec,
    truth: &GroundTruth,
    noise: NoiseKind,
    outer_m: usize,
    inner_m: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<DecompositionReport> {
    check_replicates(outer_m, inner_m)?;
    noise.validate()?;
    if truth.dimension() != source.d() || norm.dimension != source.d() {
        return Err(Error::DimensionMismatch { expected: source.d(), found: truth.dimension() });
    }
    let per_outer: Vec<Result<(Option<OuterTerms>, usize)>> = (0..outer_m as u64)
        .into_par_iter()
        .map(|o| {
            let x = source.design(key, o)?;
            let (sols, failures) = inner_solutions(&x, norm, truth, noise, inner_m, key, o, opts)?;
            let terms = (sols.len() >= 2).then(|| outer_terms(&sols, &truth.w_star));
            Ok((terms, failures))
        })
        .collect();
    let mut terms = Vec::with_capacity(outer_m);
    let mut failures = 0;
    for r in per_outer {
        let (t, f) = r?;
        failures += f;
        terms.extend(t);
    }
    check_failure_budget(failures, outer_m * inner_m)?;
    if terms.len() < 2 {
        return Err(Error::Estimator("fewer than two usable outer replicates".into()));
    }
    let column = |f: fn(&OuterTerms) -> f64| -> Vec<f64> { terms.iter().map(f).collect() };
    let e1 = column(|t| t.e1);
    let e2 = column(|t| t.e2);
    let t2 = column(|t| t.t2);
    let mse = column(|t| t.mse);
    let t1: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| a + b).collect();
    let diff: Vec<f64> = terms.iter().map(|t| t.mse - (t.e1 + t.e2 + t.t2)).collect();

    let t1_est = stats::mean_estimate(&t1);
    let t2_est = stats::mean_estimate(&t2);
    let mse_est = stats::mean_estimate(&mse);
    Ok(DecompositionReport {
        e1: stats::mean_estimate(&e1),
        e2: stats::mean_estimate(&e2),
        t1: t1_est,
        t2: t2_est,
        mse: mse_est,
        outer_samples: terms.len(),
        inner_samples: inner_m,
        failures,
        consistency_residual: (mse_est.mean - (t1_est.mean + t2_est.mean)).abs(),
        consistency_stderr: stats::mean_estimate(&diff).stderr,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HermiteCoefficients {
    /// α_i ∈ R^d for i = 1..n.
    pub alpha: Vec<DVector<f64>>,
    pub stderr_per_coordinate: Vec<DVector<f64>>,
    pub inner_samples: usize,
}

impl HermiteCoefficients {
    /// ‖Xα_i − e_i‖₂ and the ℓ2 norm of its per-coordinate standard errors,
    /// computed from the per-sample images X·a_s.
    pub fn interpolation_residuals(&self, x: &Design, samples: &HermiteSamples) -> Vec<(f64, f64)> {
        (0..self.alpha.len())
            .map(|i| {
                let images: Vec<DVector<f64>> = samples.per_index[i].iter().map(|a| &x.matrix * a).collect();
                let (mean, se) = vector_mean_stderr(&images);
                let mut target = DVector::zeros(x.n());
                target[i] = 1.0;
                ((mean - target).norm(), se.norm())
            })
            .collect()
    }
}

/// The per-sample antithetic terms behind [`HermiteCoefficients`].
#[derive(Debug, Clone)]
pub struct HermiteSamples {
    /// per_index[i][s] = (|ξ_i|/2)(F(ξ⁺ⁱ) − F(ξ⁻ⁱ)) for sample s.
    pub per_index: Vec<Vec<DVector<f64>>>,
}

fn vector_mean_stderr(xs: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let d = xs[0].len();
    let mut mean = DVector::zeros(d);
    let mut se = DVector::zeros(d);
    let mut column = vec![0.0; xs.len()];
    for j in 0..d {
        for (c, x) in column.iter_mut().zip(xs) {
            *c = x[j];
        }
        let est = stats::mean_estimate(&column);
        mean[j] = est.mean;
        se[j] = est.stderr;
    }
    (mean, se)
}

/// Degree-1 Hermite coefficients α_i = E[(|ξ_i|/2)(F(ξ⁺ⁱ) − F(ξ⁻ⁱ))] of a
/// map F: R^n → R^d, where ξ^{±i} is ξ with its i-th entry set to ±|ξ_i|.
///
/// Since ξ is one of ξ^{±i}, the term equals ξ_i(F(ξ) − F(ξ with entry i
/// negated))/2, so each sample costs n + 1 evaluations.
pub fn estimate_hermite_map<F>(
    n: usize,
    map: F,
    inner_m: usize,
    key: StreamKey,
) -> Result<(HermiteCoefficients, HermiteSamples)>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>> + Sync,
{
    if inner_m < 2 {
        return Err(Error::Config(format!("need inner_m >= 2, got {inner_m}")));
    }
    let per_sample: Vec<Vec<DVector<f64>>> = (0..inner_m as u64)
        .into_par_iter()
        .map(|s| {
            let xi = standard_normal(n, key.with_stream(streams::NOISE).child(s));
            let base = map(&xi)?;
            (0..n)
                .map(|i| {
                    let mut flipped = xi.clone();
                    flipped[i] = -xi[i];
                    let other = map(&flipped)?;
                    Ok((&base - other) * (0.5 * xi[i]))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let per_index: Vec<Vec<DVector<f64>>> =
        (0..n).map(|i| per_sample.iter().map(|terms| terms[i].clone()).collect()).collect();
    let (alpha, stderr_per_coordinate) = per_index.iter().map(|xs| vector_mean_stderr(xs)).unzip();
    Ok((HermiteCoefficients { alpha, stderr_per_coordinate, inner_samples: inner_m }, HermiteSamples { per_index }))
}

/// Hermite coefficients of the centered interpolation map ξ ↦ ŵ(X, Xw* + ξ).
/// Solves that do not converge count against the failure budget.
pub fn estimate_hermite(
    design: &Design,
    norm: &NormSpec,
    truth: &GroundTruth,
    inner_m: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<(HermiteCoefficients, HermiteSamples)> {
    let solver = MinNormSolver::new(design, *norm, *opts)?;
    let clean = &design.matrix * &truth.w_star;
    let failures = std::sync::atomic::AtomicUsize::new(0);
    let result = estimate_hermite_map(
        design.n(),
        |xi| {
            let sol = solver.solve(&(&clean + xi))?;
            if !sol.is_converged() {
                failures.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
            }
            Ok(sol.weights)
        },
        inner_m,
        key,
    )?;
    check_failure_budget(failures.into_inner(), inner_m * (design.n() + 1))?;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PsiEstimate {
    pub median: f64,
    pub lower_quartile: f64,
    pub upper_quartile: f64,
    /// Draws whose ball contains no interpolator; counted as +∞.
    pub infeasible: usize,
    pub failures: usize,
    pub outer_samples: usize,
}

/// Ψ_n(v, r): the median over designs of min{‖w‖₂ : Xw = v, ‖w‖ ≤ r}.
pub fn estimate_psi(
    source: &DesignSource,
    v: &DVector<f64>,
    norm: &NormSpec,
    r: f64,
    outer_m: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<PsiEstimate> {
    if outer_m == 0 {
        return Err(Error::Config("Ψ needs at least one design draw".into()));
    }
    if !(r > 0.0) {
        return Err(Error::Config(format!("radius must be > 0, got {r}")));
    }
    if v.len() != source.n() {
        return Err(Error::DimensionMismatch { expected: source.n(), found: v.len() });
    }
    let psi_key = key.with_stream(streams::PSI_DESIGN);
    let results: Vec<Result<(MniSolution, ())>> = (0..outer_m as u64)
        .into_par_iter()
        .map(|o| {
            let x = match source {
                DesignSource::Random(spec) => sample_design(*spec, psi_key.child(o))?,
                DesignSource::Fixed(x) => x.clone(),
            };
            let prep = PreparedDesign::new(&x)?;
            let mut sol = min_l2_in_ball_prepared(&prep, v, norm, r, opts)?;
            if matches!(sol.status, SolveStatus::Infeasible { .. }) {
                // Infeasible draws are a legitimate outcome, not a solver failure.
                sol.l2_norm = f64::INFINITY;
                sol.status = SolveStatus::Converged;
            }
            Ok((sol, ()))
        })
        .collect();
    let (kept, failures) = converged_values(results)?;
    let mut values: Vec<f64> = kept.into_iter().map(|(s, _)| s.l2_norm).collect();
    let infeasible = values.iter().filter(|v| v.is_infinite()).count();
    if 2 * infeasible > values.len() {
        return Err(Error::Estimator(format!(
            "Ψ median undefined: {infeasible} of {} draws infeasible at radius {r}",
            values.len()
        )));
    }
    stats::sort_floats(&mut values);
    Ok(PsiEstimate {
        median: stats::sorted_quantile(&values, 0.5),
        lower_quartile: stats::sorted_quantile(&values, 0.25),
        upper_quartile: stats::sorted_quantile(&values, 0.75),
        infeasible,
        failures,
        outer_samples: values.len(),
    })
}

/// Constants for the reverse Efron–Stein check.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EfronSteinConstants {
    /// Multiplier C of the radius C·K·M_n/(t√n).
    #[serde(default = "one")]
    pub constant: f64,
    /// The check passes when T2 ≥ tolerance_factor · n·Ψ².
    #[serde(default = "default_tolerance_factor")]
    pub tolerance_factor: f64,
}

fn one() -> f64 {
    1.0
}

fn default_tolerance_factor() -> f64 {
    1e-2
}

impl Default for EfronSteinConstants {
    fn default() -> Self {
        Self { constant: one(), tolerance_factor: default_tolerance_factor() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfronSteinBound {
    /// Gaussian mean M_n(F) over designs and noise.
    pub m_n: MeanEstimate,
    /// K-convexity upper bound used.
    pub k: f64,
    /// Cotype-2 constant used.
    pub t: f64,
    /// σ·C·K·M_n/(t√n), the radius at which Ψ is evaluated.
    pub radius: f64,
    pub psi: PsiEstimate,
    /// n·Ψ_n(σe1, radius)².
    pub rhs_bound: f64,
}

/// Right-hand side n·Ψ_n(σ·e1, σ·C·K·M_n/(t√n))² of the reverse Efron–Stein
/// bound, with σ² the noise variance. M_n averages the gauge over
/// `outer_m` designs and `inner_m` Gaussian vectors each.
#[allow(clippy::too_many_arguments)]
pub fn reverse_efron_stein_bound(
    source: &DesignSource,
    norm: &NormSpec,
    noise: NoiseKind,
    outer_m: usize,
    inner_m: usize,
    constants: &EfronSteinConstants,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<EfronSteinBound> {
    check_replicates(outer_m, inner_m)?;
    noise.validate()?;
    let curvature = curvature_constants(norm)?;
    let (k, t) = (curvature.kconvexity_upper, curvature.cotype2_t);
    let n = source.n();
    let norm_key = key.with_stream(streams::NORM_NOISE);
    let per_outer: Vec<Result<Vec<f64>>> = (0..outer_m as u64)
        .into_par_iter()
        .map(|o| {
            let x = source.design(key, o)?;
            let solver = MinNormSolver::new(&x, *norm, *opts)?;
            let mut values = Vec::with_capacity(inner_m);
            for i in 0..inner_m as u64 {
                let sol = solver.solve(&standard_normal(n, norm_key.child(o).child(i)))?;
                values.push(if sol.is_converged() { Some(sol.norm_value) } else { None });
            }
            Ok(values.into_iter().flatten().collect())
        })
        .collect();
    let mut gauges = Vec::with_capacity(outer_m * inner_m);
    for r in per_outer {
        gauges.extend(r?);
    }
    check_failure_budget(outer_m * inner_m - gauges.len(), outer_m * inner_m)?;
    let m_n = stats::mean_estimate(&gauges);
    let sigma = noise.variance().sqrt();
    let radius = sigma * constants.constant * k * m_n.mean / (t * (n as f64).sqrt());
    let mut e1 = DVector::zeros(n);
    e1[0] = sigma;
    let psi = estimate_psi(source, &e1, norm, radius, outer_m, key, opts)?;
    Ok(EfronSteinBound { m_n, k, t, radius, psi, rhs_bound: n as f64 * psi.median * psi.median })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfronSteinCheck {
    pub lhs_t2: MeanEstimate,
    pub bound: EfronSteinBound,
    /// T2 − tolerance_factor·rhs.
    pub slack: f64,
    pub satisfied: bool,
}

impl EfronSteinCheck {
    pub fn new(lhs_t2: MeanEstimate, bound: EfronSteinBound, constants: &EfronSteinConstants) -> Self {
        let slack = lhs_t2.mean - constants.tolerance_factor * bound.rhs_bound;
        Self { lhs_t2, bound, slack, satisfied: slack >= 0.0 }
    }
}

/// T2 from [`estimate_decomposition`] against [`reverse_efron_stein_bound`].
#[allow(clippy::too_many_arguments)]
pub fn reverse_efron_stein_check(
    source: &DesignSource,
    norm: &NormSpec,
    truth: &GroundTruth,
    noise: NoiseKind,
    outer_m: usize,
    inner_m: usize,
    constants: &EfronSteinConstants,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<EfronSteinCheck> {
    let report = estimate_decomposition(source, norm, truth, noise, outer_m, inner_m, key, opts)?;
    let bound = reverse_efron_stein_bound(source, norm, noise, outer_m, inner_m, constants, key, opts)?;
    Ok(EfronSteinCheck::new(report.t2, bound, constants))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AndersonGap {
    /// E‖ξ + x‖² − E‖ξ‖², ξ ~ N(0, I_d).
    pub gap: MeanEstimate,
    /// gap/‖x‖², with ‖·‖ the norm under study.
    pub ratio_to_xnorm2: f64,
    pub ratio_stderr: f64,
}

/// Anderson gap with common random numbers: both expectations use the same ξ.
pub fn anderson_gap(norm: &NormSpec, x: &DVector<f64>, m_samples: usize, key: StreamKey) -> Result<AndersonGap> {
    norm.validate()?;
    if x.len() != norm.dimension {
        return Err(Error::DimensionMismatch { expected: norm.dimension, found: x.len() });
    }
    if m_samples < 2 {
        return Err(Error::Config(format!("need at least 2 samples, got {m_samples}")));
    }
    let p = norm.exponent();
    let d = norm.dimension;
    let diffs: Vec<f64> = (0..m_samples as u64)
        .into_par_iter()
        .map(|s| {
            let xi = standard_normal(d, key.child(s));
            let shifted = &xi + x;
            lp_norm(shifted.as_slice(), p).powi(2) - lp_norm(xi.as_slice(), p).powi(2)
        })
        .collect();
    let gap = stats::mean_estimate(&diffs);
    let xn2 = lp_norm(x.as_slice(), p).powi(2);
    let (ratio, ratio_se) = if xn2 > 0.0 { (gap.mean / xn2, gap.stderr / xn2) } else { (0.0, 0.0) };
    Ok(AndersonGap { gap, ratio_to_xnorm2: ratio, ratio_stderr: ratio_se })
}
