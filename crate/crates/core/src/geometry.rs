//! Monte Carlo functionals of the projected unit ball F_n = X·B and the
//! dyadic diagnostics used to read the structure of an interpolator.
//!
//! For a design X, the gauge of F_n at ξ is the minimal norm of an
//! interpolator of ξ, and its support function is ‖Xᵀξ‖ in the dual norm.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::{abs_pow, lp_norm, NormSpec};
use crate::rng::{rademacher, standard_normal, streams, Design, StreamKey};
use crate::solvers::{MinNormSolver, MniSolution, PreparedDesign, SolverOptions, TruncatedGauge};
use crate::stats::{self, MeanEstimate};

/// Largest tolerated fraction of non-converged solves in one estimate.
pub const FAILURE_BUDGET: f64 = 0.01;

/// Default number of multistarts for the inradius search.
pub const DEFAULT_MULTISTARTS: usize = 64;

/// Mean of solver-derived samples, with the solves that did not converge
/// excluded and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolvedMean {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
    pub failures: usize,
}

impl SolvedMean {
    pub fn estimate(&self) -> MeanEstimate {
        MeanEstimate { mean: self.mean, stderr: self.stderr }
    }
}

/// Errors if more than [`FAILURE_BUDGET`] of `total` solves failed.
pub fn check_failure_budget(failures: usize, total: usize) -> Result<()> {
    if total > 0 && failures as f64 > FAILURE_BUDGET * total as f64 {
        return Err(Error::Estimator(format!(
            "{failures} of {total} solves did not converge (budget {:.0}%)",
            100.0 * FAILURE_BUDGET
        )));
    }
    Ok(())
}

/// Splits solutions into converged values and a failure count.
pub(crate) fn converged_values<T>(results: Vec<Result<(MniSolution, T)>>) -> Result<(Vec<(MniSolution, T)>, usize)> {
    let total = results.len();
    let mut kept = Vec::with_capacity(total);
    for r in results {
        let (sol, extra) = r?;
        if sol.is_converged() {
            kept.push((sol, extra));
        }
    }
    let failures = total - kept.len();
    check_failure_budget(failures, total)?;
    Ok((kept, failures))
}

fn check_samples(m_samples: usize) -> Result<()> {
    if m_samples < 2 {
        return Err(Error::Config(format!("need at least 2 Monte Carlo samples, got {m_samples}")));
    }
    Ok(())
}

/// Per-sample gauge values ‖ξ_s‖_{F_n} for ξ_s = N(0, I_n) drawn from `key.child(s)`.
fn gauge_samples(solver: &MinNormSolver, m_samples: usize, key: StreamKey) -> Result<(Vec<(f64, u64)>, usize)> {
    let n = solver.prepared().n();
    let results: Vec<Result<(MniSolution, u64)>> = (0..m_samples as u64)
        .into_par_iter()
        .map(|s| {
            let xi = standard_normal(n, key.child(s));
            solver.solve(&xi).map(|sol| (sol, s))
        })
        .collect();
    let (kept, failures) = converged_values(results)?;
    Ok((kept.into_iter().map(|(sol, s)| (sol.norm_value, s)).collect(), failures))
}

/// Gaussian mean M(F_n) = E‖ξ‖_{F_n} of the gauge, one minimum-norm solve per sample.
pub fn estimate_m(
    design: &Design,
    norm: &NormSpec,
    m_samples: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<SolvedMean> {
    check_samples(m_samples)?;
    let solver = MinNormSolver::new(design, *norm, *opts)?;
    let (values, failures) = gauge_samples(&solver, m_samples, key)?;
    let values: Vec<f64> = values.into_iter().map(|(v, _)| v).collect();
    let est = stats::mean_estimate(&values);
    Ok(SolvedMean { mean: est.mean, stderr: est.stderr, samples: values.len(), failures })
}

fn support_samples(
    design: &Design,
    norm: &NormSpec,
    m_samples: usize,
    draw: impl Fn(u64) -> DVector<f64> + Sync,
) -> Vec<f64> {
    let q = norm.conjugate_exponent();
    (0..m_samples as u64)
        .into_par_iter()
        .map(|s| {
            let z = design.matrix.tr_mul(&draw(s));
            lp_norm(z.as_slice(), q)
        })
        .collect()
}

fn check_design_norm(design: &Design, norm: &NormSpec) -> Result<()> {
    norm.validate()?;
    if norm.dimension != design.d() {
        return Err(Error::DimensionMismatch { expected: design.d(), found: norm.dimension });
    }
    Ok(())
}

/// Gaussian mean width M*(F_n) = E‖Xᵀξ‖_dual; no solve is needed.
pub fn estimate_m_star(design: &Design, norm: &NormSpec, m_samples: usize, key: StreamKey) -> Result<MeanEstimate> {
    check_samples(m_samples)?;
    check_design_norm(design, norm)?;
    let n = design.n();
    let values = support_samples(design, norm, m_samples, |s| standard_normal(n, key.child(s)));
    Ok(stats::mean_estimate(&values))
}

/// Best-found inner ℓ2 radius of F_n, min over unit u of ‖Xᵀu‖_dual.
///
/// The objective is nonconvex on the sphere, so the value is an upper bound
/// on the true radius from multistart Riemannian gradient descent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InradiusEstimate {
    /// min ‖Xᵀu‖_dual found, i.e. 1/b(F_n).
    pub value: f64,
    /// b(F_n) = 1/value.
    pub b: f64,
    pub certified: bool,
    pub multistarts: usize,
}

pub fn estimate_inradius(
    design: &Design,
    norm: &NormSpec,
    multistarts: usize,
    key: StreamKey,
) -> Result<InradiusEstimate> {
    if multistarts == 0 {
        return Err(Error::Config("inradius search needs at least one start".into()));
    }
    check_design_norm(design, norm)?;
    let q = norm.conjugate_exponent();
    let n = design.n();
    let values: Vec<f64> = (0..multistarts as u64)
        .into_par_iter()
        .map(|s| {
            let start = standard_normal(n, key.child(s));
            sphere_descent(design, q, start)
        })
        .collect();
    let value = values.into_iter().fold(f64::INFINITY, f64::min);
    Ok(InradiusEstimate { value, b: 1.0 / value, certified: false, multistarts })
}

/// Objective ‖Xᵀu‖_q and its Euclidean gradient in u.
fn support_and_gradient(design: &Design, q: f64, u: &DVector<f64>) -> (f64, DVector<f64>) {
    let z = design.matrix.tr_mul(u);
    let value = lp_norm(z.as_slice(), q);
    if value == 0.0 {
        return (0.0, DVector::zeros(u.len()));
    }
    let dz = z.map(|v| (abs_pow(v / value, q - 1.0)).copysign(v));
    (value, &design.matrix * dz)
}

fn sphere_descent(design: &Design, q: f64, start: DVector<f64>) -> f64 {
    const MAX_ITERS: usize = 500;
    let norm = start.norm();
    let mut u =
        if norm > 0.0 { start / norm } else { DVector::from_element(design.n(), 1.0 / (design.n() as f64).sqrt()) };
    let (mut value, mut grad) = support_and_gradient(design, q, &u);
    let mut step = 1.0 / value.max(f64::MIN_POSITIVE);
    for _ in 0..MAX_ITERS {
        let radial = grad.dot(&u);
        let tangent = &grad - &u * radial;
        let tn2 = tangent.norm_squared();
        if tn2.sqrt() <= 1e-12 * value.max(1e-300) {
            break;
        }
        let mut improved = false;
        for _ in 0..50 {
            let mut trial = &u - &tangent * step;
            trial /= trial.norm();
            let (tv, tg) = support_and_gradient(design, q, &trial);
            if tv <= value - 1e-4 * step * tn2 {
                let gain = value - tv;
                u = trial;
                value = tv;
                grad = tg;
                step *= 2.0;
                improved = gain > 1e-15 * value;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    value
}

/// Gaussian and spherical complexities of F_n.
///
/// Gaussian normalization uses M, M* directly; spherical quantities divide
/// each Gaussian mean by E‖g‖₂ (the chi mean), the exact form of
/// M_s ≈ n^{−1/2} M_g.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub m_mean: f64,
    pub m_stderr: f64,
    pub mstar_mean: f64,
    pub mstar_stderr: f64,
    /// Best-found min ‖Xᵀu‖_dual over the unit sphere (1/b).
    pub inradius: f64,
    /// Best-found b(F_n).
    pub inradius_inv: f64,
    /// M*/n.
    pub gaussian_complexity: f64,
    /// E‖Xᵀε‖_dual / n over Rademacher ε.
    pub rademacher_complexity: f64,
    pub rademacher_stderr: f64,
    /// M·M*/n (Gaussian normalization).
    pub r_mm_star: f64,
    pub r_mm_star_stderr: f64,
    /// M_s·M*_s (spherical normalization).
    pub r_mm_star_spherical: f64,
    pub r_mm_star_spherical_stderr: f64,
    /// b·M*_s (spherical normalization).
    pub r_bm_star: f64,
    pub r_bm_star_stderr: f64,
    /// E‖g‖₂ for g ~ N(0, I_n).
    pub chi_mean: f64,
    pub samples_used: usize,
    pub failures: usize,
}

/// M and M* are estimated from the same Gaussian draws; the product's
/// standard error is propagated with their sample covariance.
pub fn complexity_ratios(
    design: &Design,
    norm: &NormSpec,
    m_samples: usize,
    multistarts: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<ComplexityReport> {
    check_samples(m_samples)?;
    let n = design.n();
    let q = norm.conjugate_exponent();
    let solver = MinNormSolver::new(design, *norm, *opts)?;
    let (gauges, failures) = gauge_samples(&solver, m_samples, key)?;
    let pairs: Vec<(f64, f64)> = gauges
        .par_iter()
        .map(|&(g, s)| {
            let z = design.matrix.tr_mul(&standard_normal(n, key.child(s)));
            (g, lp_norm(z.as_slice(), q))
        })
        .collect();
    let a: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let b: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let m = stats::mean_estimate(&a);
    let ms = stats::mean_estimate(&b);
    let cov = covariance(&a, &b);
    let used = a.len() as f64;
    let product_var = (ms.mean * ms.mean * stats::sample_variance(&a)
        + m.mean * m.mean * stats::sample_variance(&b)
        + 2.0 * m.mean * ms.mean * cov)
        / used;
    let product_se = product_var.max(0.0).sqrt();

    let signs_key = key.with_stream(streams::SIGNS);
    let rad = stats::mean_estimate(&support_samples(design, norm, m_samples, |s| rademacher(n, signs_key.child(s))));
    let inradius = estimate_inradius(design, norm, multistarts, key.with_stream(streams::MULTISTART))?;
    let chi = stats::chi_mean(n);
    let nf = n as f64;

    Ok(ComplexityReport {
        m_mean: m.mean,
        m_stderr: m.stderr,
        mstar_mean: ms.mean,
        mstar_stderr: ms.stderr,
        inradius: inradius.value,
        inradius_inv: inradius.b,
        gaussian_complexity: ms.mean / nf,
        rademacher_complexity: rad.mean / nf,
        rademacher_stderr: rad.stderr / nf,
        r_mm_star: m.mean * ms.mean / nf,
        r_mm_star_stderr: product_se / nf,
        r_mm_star_spherical: m.mean * ms.mean / (chi * chi),
        r_mm_star_spherical_stderr: product_se / (chi * chi),
        r_bm_star: inradius.b * ms.mean / chi,
        r_bm_star_stderr: inradius.b * ms.stderr / chi,
        chi_mean: chi,
        samples_used: a.len(),
        failures,
    })
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    if a.len() < 2 {
        return 0.0;
    }
    let (ma, mb) = (stats::mean(a), stats::mean(b));
    let terms: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).collect();
    stats::pairwise_sum(&terms) / (a.len() - 1) as f64
}

fn check_k(d: usize, k: usize) -> Result<()> {
    if k == 0 || k > d {
        return Err(Error::OutOfRange { index: k, max: d });
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(p > 1.0 && p <= 2.0) {
        return Err(Error::Config(format!("p must lie in (1, 2], got {p}")));
    }
    Ok(())
}

/// Covering scale of the normalized ℓp ball at entropy level k:
/// (d·log(ed/k)/k)^{1/p−1/2} for k ≥ log d, and d^{1/p−1/2} below.
pub fn lambda_k(d: usize, k: usize, p: f64) -> Result<f64> {
    check_k(d, k)?;
    check_p(p)?;
    let (df, kf) = (d as f64, k as f64);
    let exponent = 1.0 / p - 0.5;
    if kf < df.ln() {
        Ok(df.powf(exponent))
    } else {
        Ok((df * (std::f64::consts::E * df / kf).ln() / kf).powf(exponent))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateRegime {
    Gaussian,
    Subgaussian,
}

/// log log d, floored at 1 so that small d keep a positive denominator.
fn loglog(d: f64) -> f64 {
    d.ln().max(std::f64::consts::E).ln()
}

/// Predicted envelope for δ_k‖w_k‖₂ at block size k (constant 1):
/// (k/d)^{1/2}·(log(ed/k)/log log d)^{1/(2(p−1))} for Gaussian designs, and
/// the same without the log log d denominator for sub-Gaussian designs.
pub fn predicted_delta_bound(d: usize, k: usize, p: f64, regime: CovariateRegime) -> Result<f64> {
    check_k(d, k)?;
    check_p(p)?;
    let (df, kf) = (d as f64, k as f64);
    let log_term = (std::f64::consts::E * df / kf).ln();
    let base = match regime {
        CovariateRegime::Gaussian => log_term / loglog(df),
        CovariateRegime::Subgaussian => log_term,
    };
    Ok((kf / df).sqrt() * base.powf(1.0 / (2.0 * (p - 1.0))))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RangeTag {
    R1,
    R2,
    #[serde(rename = "head")]
    Head,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicBlock {
    /// Block size index; the block holds ranks k/2+1..=k. Zero for the head.
    pub k: usize,
    /// Raw block δ_k·w_k, the entries of ranks k/2+1..=k.
    pub block: DVector<f64>,
    /// Unit ℓp direction w_k, or zero when the block carries no mass.
    pub direction: DVector<f64>,
    /// ‖block‖_p.
    pub delta_k: f64,
    /// ‖block‖₂ = δ_k‖w_k‖₂.
    pub l2_of_block: f64,
    pub range_tag: RangeTag,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadicProfile {
    pub p: f64,
    pub dimension: usize,
    /// Boundary ⌊n/log(d/n)⌋ between the two ranges.
    pub r2_boundary: usize,
    /// Dyadic blocks in increasing k, followed by the head block.
    pub blocks: Vec<DyadicBlock>,
}

impl DyadicProfile {
    /// Σ δ_k w_k over all blocks, head included. Supports are disjoint, so
    /// the sum is exact.
    pub fn reassemble(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.dimension);
        for b in &self.blocks {
            out += &b.block;
        }
        out
    }

    pub fn dyadic_blocks(&self) -> impl Iterator<Item = &DyadicBlock> {
        self.blocks.iter().filter(|b| b.range_tag != RangeTag::Head)
    }

    pub fn head(&self) -> Option<&DyadicBlock> {
        self.blocks.iter().find(|b| b.range_tag == RangeTag::Head)
    }
}

/// Indices of `w` ordered by decreasing magnitude, ties by lower index.
pub fn magnitude_order(w: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].abs().total_cmp(&w[a].abs()).then(a.cmp(&b)));
    idx
}

/// Π_k(w): the k largest-magnitude entries of w, zero elsewhere.
pub fn top_k(w: &DVector<f64>, k: usize) -> DVector<f64> {
    let mut out = DVector::zeros(w.len());
    for &i in magnitude_order(w.as_slice()).iter().take(k) {
        out[i] = w[i];
    }
    out
}

/// Dyadic block sizes 1, 2, 4, … up to ⌊d/log d⌋ (at least 1).
pub fn dyadic_sizes(d: usize) -> Vec<usize> {
    let df = d as f64;
    let cap = if d < 3 { d } else { ((df / df.ln()).floor() as usize).clamp(1, d) };
    let mut out = Vec::new();
    let mut k = 1;
    while k <= cap {
        out.push(k);
        k *= 2;
    }
    out
}

/// ⌊n/log(d/n)⌋, with log(d/n) floored at 1.
pub fn r2_boundary(d: usize, n: usize) -> usize {
    let ratio = (d as f64 / n as f64).ln().max(1.0);
    (n as f64 / ratio).floor() as usize
}

/// Decomposes w into dyadic magnitude blocks w_k = Π_k(w) − Π_{k/2}(w),
/// each written as δ_k times a unit-ℓp direction, plus a head block holding
/// the entries below the largest dyadic size.
pub fn dyadic_profile(w: &DVector<f64>, p: f64, n_context: usize) -> Result<DyadicProfile> {
    check_p(p)?;
    if w.iter().all(|&v| v == 0.0) {
        return Err(Error::ZeroVector);
    }
    if n_context == 0 {
        return Err(Error::Config("n_context must be >= 1".into()));
    }
    let d = w.len();
    let order = magnitude_order(w.as_slice());
    let boundary = r2_boundary(d, n_context);
    let mut blocks = Vec::new();
    let mut start = 0usize;
    let make = |ranks: &[usize], k: usize, tag: RangeTag| {
        let mut v: DVector<f64> = DVector::zeros(d);
        for &i in ranks {
            v[i] = w[i];
        }
        let delta = lp_norm(v.as_slice(), p);
        let l2 = v.norm();
        let direction = if delta > 0.0 { &v / delta } else { v.clone() };
        DyadicBlock { k, block: v, direction, delta_k: delta, l2_of_block: l2, range_tag: tag }
    };
    for k in dyadic_sizes(d) {
        let tag = if k <= boundary { RangeTag::R2 } else { RangeTag::R1 };
        blocks.push(make(&order[start..k], k, tag));
        start = k;
    }
    blocks.push(make(&order[start..], 0, RangeTag::Head));
    Ok(DyadicProfile { p, dimension: d, r2_boundary: boundary, blocks })
}

/// Smallest truncation radius r at which the Gaussian mean of the truncated
/// gauge stays within the factor `c` of the untruncated one, i.e.
/// M(F_n)/M(F_n ∩ r·B₂) ≥ c. Larger `c` demands less truncation and returns
/// a larger radius.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RStarEstimate {
    pub r_star: f64,
    /// M(F_n) over the same draws.
    pub m_full: f64,
    /// Truncated mean at r_star.
    pub m_truncated: f64,
    pub factor: f64,
    pub samples: usize,
}

pub const DEFAULT_RSTAR_FACTOR: f64 = 0.5;

pub fn estimate_r_star(
    design: &Design,
    norm: &NormSpec,
    m_samples: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<RStarEstimate> {
    estimate_r_star_with_factor(design, norm, m_samples, DEFAULT_RSTAR_FACTOR, key, opts)
}

pub fn estimate_r_star_with_factor(
    design: &Design,
    norm: &NormSpec,
    m_samples: usize,
    factor: f64,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<RStarEstimate> {
    check_samples(m_samples)?;
    check_design_norm(design, norm)?;
    if !(factor > 0.0 && factor < 1.0) {
        return Err(Error::Config(format!("r_star factor must lie in (0, 1), got {factor}")));
    }
    let prep = PreparedDesign::new(design)?;
    let n = prep.n();
    let xis: Vec<DVector<f64>> = (0..m_samples as u64).map(|s| standard_normal(n, key.child(s))).collect();
    let gauges: Vec<TruncatedGauge> =
        xis.par_iter().map(|xi| TruncatedGauge::new(&prep, xi, norm, opts)).collect::<Result<_>>()?;
    let full: Vec<f64> = gauges.iter().map(|g| g.untruncated()).collect();
    let m_full = stats::mean(&full);
    let truncated_mean = |r: f64| -> Result<f64> {
        let values = gauges.par_iter().map(|g| g.at(r)).collect::<Result<Vec<f64>>>()?;
        Ok(stats::mean(&values))
    };
    let holds = |r: f64| -> Result<(bool, f64)> {
        let m = truncated_mean(r)?;
        Ok((m_full >= factor * m, m))
    };

    // Above the largest inactive radius truncation never binds.
    let mut hi = gauges.iter().map(|g| g.inactive_radius()).fold(0.0, f64::max);
    let (_, mut m_hi) = holds(hi)?;
    let mut lo = hi;
    let mut found_lo = false;
    for _ in 0..200 {
        lo /= 2.0;
        let (ok, m) = holds(lo)?;
        if !ok {
            found_lo = true;
            break;
        }
        hi = lo;
        m_hi = m;
    }
    if !found_lo {
        return Err(Error::Estimator("r_star search did not bracket".into()));
    }
    while hi / lo > 1.0 + 1e-6 {
        let mid = (lo * hi).sqrt();
        let (ok, m) = holds(mid)?;
        if ok {
            hi = mid;
            m_hi = m;
        } else {
            lo = mid;
        }
    }
    Ok(RStarEstimate { r_star: hi, m_full, m_truncated: m_hi, factor, samples: m_samples })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InductiveBias {
    pub noise_norm_mean: f64,
    pub noise_norm_stderr: f64,
    pub signal_norm: f64,
    pub ratio: f64,
}

/// Compares the typical interpolation cost of pure noise, E‖ξ‖_{F_n}, with
/// that of the clean signal, ‖ŵ(X, Xw*)‖.
pub fn check_inductive_bias(
    design: &Design,
    norm: &NormSpec,
    w_star: &DVector<f64>,
    m_samples: usize,
    key: StreamKey,
    opts: &SolverOptions,
) -> Result<InductiveBias> {
    check_samples(m_samples)?;
    if w_star.len() != design.d() {
        return Err(Error::DimensionMismatch { expected: design.d(), found: w_star.len() });
    }
    let solver = MinNormSolver::new(design, *norm, *opts)?;
    let (values, _) = gauge_samples(&solver, m_samples, key)?;
    let values: Vec<f64> = values.into_iter().map(|(v, _)| v).collect();
    let noise = stats::mean_estimate(&values);
    let signal = solver.solve(&(&design.matrix * w_star))?;
    if !signal.is_converged() {
        return Err(Error::Estimator("signal interpolation did not converge".into()));
    }
    Ok(InductiveBias {
        noise_norm_mean: noise.mean,
        noise_norm_stderr: noise.stderr,
        signal_norm: signal.norm_value,
        ratio: noise.mean / signal.norm_value,
    })
}
