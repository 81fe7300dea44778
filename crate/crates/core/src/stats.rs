//! Small deterministic summary statistics shared by the Monte Carlo estimators.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

/// A Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanEstimate {
    pub mean: f64,
    pub stderr: f64,
}

impl MeanEstimate {
    pub fn exact(value: f64) -> Self {
        Self { mean: value, stderr: 0.0 }
    }

    /// Whether `value` lies within `k` standard errors of the mean.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.stderr
    }
}

/// Pairwise summation. The result depends only on the order of `xs`, never on
/// how the values were produced, so parallel fan-out stays bit-reproducible.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance (denominator `len - 1`).
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (xs.len() - 1) as f64
}

pub fn mean_estimate(xs: &[f64]) -> MeanEstimate {
    let n = xs.len();
    let stderr = if n < 2 { f64::NAN } else { (sample_variance(xs) / n as f64).sqrt() };
    MeanEstimate { mean: mean(xs), stderr }
}

/// Linear-interpolated quantile of already-sorted data, `prob` in [0, 1].
/// Infinite entries are allowed and order as expected.
pub fn sorted_quantile(sorted: &[f64], prob: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = prob.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi || sorted[lo] == sorted[hi] {
        return sorted[lo];
    }
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

pub fn sort_floats(xs: &mut [f64]) {
    xs.sort_by(|a, b| a.total_cmp(b));
}

/// E‖g‖₂ for g ~ N(0, I_n): √2 Γ((n+1)/2) / Γ(n/2).
///
/// Relates Gaussian and spherical means exactly: M_g(K) = chi_mean(n) · M_s(K).
pub fn chi_mean(n: usize) -> f64 {
    let n = n as f64;
    (2f64.ln() / 2.0 + ln_gamma((n + 1.0) / 2.0) - ln_gamma(n / 2.0)).exp()
}
