//! ℓp norms on R^d, their duals, and the curvature predicates (2-uniform
//! convexity, p-uniform smoothness, cotype 2) used by the estimators.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamKey};
use crate::stats;

/// Additive slack absorbing rounding in the curvature inequalities.
pub const CURVATURE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NormKind {
    /// ℓp with exponent `p` ≥ 1 (`f64::INFINITY` allowed for evaluation).
    Lp {
        p: f64,
    },
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    pub dimension: usize,
}

impl NormSpec {
    /// ℓp on R^d with p ∈ (1, 2], the range the solvers and curvature
    /// constants support.
    pub fn lp(p: f64, dimension: usize) -> Result<Self> {
        let spec = Self { kind: NormKind::Lp { p }, dimension };
        spec.validate()?;
        Ok(spec)
    }

    pub fn euclidean(dimension: usize) -> Self {
        Self { kind: NormKind::Euclidean, dimension }
    }

    /// ℓ1, for direct evaluation only. Never a solver target.
    pub fn l1(dimension: usize) -> Self {
        Self { kind: NormKind::Lp { p: 1.0 }, dimension }
    }

    /// ℓp with any exponent in [1, ∞]; only evaluation is meaningful.
    pub fn lp_unchecked(p: f64, dimension: usize) -> Self {
        Self { kind: NormKind::Lp { p }, dimension }
    }

    pub fn exponent(&self) -> f64 {
        match self.kind {
            NormKind::Lp { p } => p,
            NormKind::Euclidean => 2.0,
        }
    }

    /// Conjugate exponent q with 1/p + 1/q = 1.
    pub fn conjugate_exponent(&self) -> f64 {
        conjugate(self.exponent())
    }

    pub fn dual(&self) -> Self {
        match self.kind {
            NormKind::Euclidean => *self,
            NormKind::Lp { p } => Self::lp_unchecked(conjugate(p), self.dimension),
        }
    }

    pub fn is_euclidean(&self) -> bool {
        self.exponent() == 2.0
    }

    pub fn with_dimension(&self, dimension: usize) -> Self {
        Self { dimension, ..*self }
    }

    /// Checks p ∈ (1, 2] and d ≥ 1.
    pub fn validate(&self) -> Result<()> {
        let p = self.exponent();
        if !(p > 1.0 && p <= 2.0) {
            return Err(Error::Config(format!("lp exponent must lie in (1, 2], got {p}")));
        }
        if self.dimension == 0 {
            return Err(Error::Config("norm dimension must be >= 1".into()));
        }
        Ok(())
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.dimension {
            return Err(Error::DimensionMismatch { expected: self.dimension, found: len });
        }
        Ok(())
    }
}

pub fn conjugate(p: f64) -> f64 {
    if p == 1.0 {
        f64::INFINITY
    } else if p.is_infinite() {
        1.0
    } else {
        p / (p - 1.0)
    }
}

/// ‖w‖_p for any p ∈ [1, ∞], scaled by the largest entry so that neither
/// overflow nor underflow occurs in the power sum.
pub fn lp_norm(w: &[f64], p: f64) -> f64 {
    let max = w.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if max == 0.0 || p.is_infinite() {
        return max;
    }
    if p == 1.0 {
        return stats::pairwise_sum(&w.iter().map(|v| v.abs()).collect::<Vec<_>>());
    }
    if p == 2.0 {
        let sq: Vec<f64> = w.iter().map(|v| (v / max) * (v / max)).collect();
        return max * stats::pairwise_sum(&sq).sqrt();
    }
    let terms: Vec<f64> = w.iter().map(|v| abs_pow(v / max, p)).collect();
    max * stats::pairwise_sum(&terms).powf(1.0 / p)
}

/// |x|^a with 0^a = 0 for a > 0.
#[inline]
pub fn abs_pow(x: f64, a: f64) -> f64 {
    let ax = x.abs();
    if ax == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            0.0
        }
    } else {
        (a * ax.ln()).exp()
    }
}

pub fn eval_norm(spec: &NormSpec, w: &DVector<f64>) -> Result<f64> {
    spec.check_len(w.len())?;
    Ok(lp_norm(w.as_slice(), spec.exponent()))
}

/// The dual norm ‖v‖_q, i.e. the support function of the unit ball.
pub fn eval_dual_norm(spec: &NormSpec, v: &DVector<f64>) -> Result<f64> {
    spec.check_len(v.len())?;
    Ok(lp_norm(v.as_slice(), spec.conjugate_exponent()))
}

/// The unit-norm vector attaining ⟨w, v⟩ = ‖v‖_dual (Hölder equality).
pub fn dual_witness(spec: &NormSpec, v: &DVector<f64>) -> Result<DVector<f64>> {
    spec.check_len(v.len())?;
    let max = v.amax();
    if max == 0.0 {
        return Err(Error::ZeroVector);
    }
    let p = spec.exponent();
    let mut w = if p == 1.0 {
        let k = v.iamax();
        let mut w = DVector::zeros(v.len());
        w[k] = v[k].signum();
        w
    } else {
        let q = conjugate(p);
        v.map(|x| (x / max).signum() * abs_pow(x / max, q - 1.0))
    };
    let norm = lp_norm(w.as_slice(), p);
    w /= norm;
    Ok(w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

fn halves(f: &DVector<f64>, g: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    ((f + g) * 0.5, (f - g) * 0.5)
}

/// ‖(f+g)/2‖² + t‖(f−g)/2‖² ≤ (‖f‖² + ‖g‖²)/2.
pub fn check_uc2(spec: &NormSpec, f: &DVector<f64>, g: &DVector<f64>, t: f64) -> Result<InequalityCheck> {
    spec.check_len(f.len())?;
    spec.check_len(g.len())?;
    let p = spec.exponent();
    let (mid, half_diff) = halves(f, g);
    let lhs = lp_norm(mid.as_slice(), p).powi(2) + t * lp_norm(half_diff.as_slice(), p).powi(2);
    let rhs = 0.5 * (lp_norm(f.as_slice(), p).powi(2) + lp_norm(g.as_slice(), p).powi(2));
    Ok(InequalityCheck { lhs, rhs, holds: lhs <= rhs + CURVATURE_SLACK })
}

/// ‖(f+g)/2‖^{p_s} + s‖(f−g)/2‖^{p_s} ≥ (‖f‖^{p_s} + ‖g‖^{p_s})/2.
pub fn check_usp(spec: &NormSpec, f: &DVector<f64>, g: &DVector<f64>, p_s: f64, s: f64) -> Result<InequalityCheck> {
    if !(p_s > 1.0 && p_s <= 2.0) || s <= 0.0 {
        return Err(Error::Config(format!("smoothness needs p_s in (1,2] and s > 0, got p_s={p_s}, s={s}")));
    }
    spec.check_len(f.len())?;
    spec.check_len(g.len())?;
    let p = spec.exponent();
    let (mid, half_diff) = halves(f, g);
    let lhs = lp_norm(mid.as_slice(), p).powf(p_s) + s * lp_norm(half_diff.as_slice(), p).powf(p_s);
    let rhs = 0.5 * (lp_norm(f.as_slice(), p).powf(p_s) + lp_norm(g.as_slice(), p).powf(p_s));
    Ok(InequalityCheck { lhs, rhs, holds: lhs >= rhs - CURVATURE_SLACK })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CotypeRatio {
    pub lhs_sum: f64,
    pub rhs_estimate: f64,
    pub rhs_stderr: f64,
    pub ratio: f64,
}

/// Σ‖f_i‖² against a Monte Carlo estimate of E_ε‖Σ ε_i f_i‖².
pub fn cotype2_ratio(
    spec: &NormSpec,
    vectors: &[DVector<f64>],
    num_sign_samples: usize,
    key: StreamKey,
) -> Result<CotypeRatio> {
    if vectors.is_empty() || num_sign_samples == 0 {
        return Err(Error::Config("cotype ratio needs at least one vector and one sign sample".into()));
    }
    for f in vectors {
        spec.check_len(f.len())?;
    }
    let p = spec.exponent();
    let lhs: Vec<f64> = vectors.iter().map(|f| lp_norm(f.as_slice(), p).powi(2)).collect();
    let lhs_sum = stats::pairwise_sum(&lhs);
    let samples: Vec<f64> = (0..num_sign_samples as u64)
        .map(|s| {
            let signs = rng::rademacher(vectors.len(), key.with_replicate(s));
            let mut acc = DVector::zeros(spec.dimension);
            for (eps, f) in signs.iter().zip(vectors) {
                acc.axpy(*eps, f, 1.0);
            }
            lp_norm(acc.as_slice(), p).powi(2)
        })
        .collect();
    let est = stats::mean_estimate(&samples);
    let rhs_stderr = if est.stderr.is_nan() { 0.0 } else { est.stderr };
    Ok(CotypeRatio { lhs_sum, rhs_estimate: est.mean, rhs_stderr, ratio: lhs_sum / est.mean })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvatureConstants {
    /// 2-uniform convexity constant t.
    pub uc2_t: f64,
    /// Uniform smoothness exponent.
    pub usp_p: f64,
    /// Uniform smoothness constant s.
    pub usp_s: f64,
    /// Cotype-2 constant implied by 2-uniform convexity, √t.
    pub cotype2_t: f64,
    /// Upper bound on the K-convexity constant, min{(p−1)^{−1/2}, √log d}, floored at 1.
    pub kconvexity_upper: f64,
}

pub fn curvature_constants(spec: &NormSpec) -> Result<CurvatureConstants> {
    spec.validate()?;
    let p = spec.exponent();
    let t = p - 1.0;
    let log_d = (spec.dimension as f64).ln();
    let k = (1.0 / t.sqrt()).min(log_d.sqrt()).max(1.0);
    Ok(CurvatureConstants { uc2_t: t, usp_p: p, usp_s: 1.0, cotype2_t: t.sqrt(), kconvexity_upper: k })
}
