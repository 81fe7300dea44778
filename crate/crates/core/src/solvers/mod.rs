//! Minimum-norm interpolation and the two auxiliary programs built on it.
//!
//! * [`solve_min_norm`]: argmin ‖w‖_p subject to Xw = y, p ∈ (1, 2].
//! * [`solve_min_l2_in_ball`]: argmin ‖w‖₂ subject to Xw = v, ‖w‖_p ≤ r.
//! * [`gauge_projected_truncated`]: the gauge of X(B_p ∩ r·B₂) at ξ.
//! * [`brute_force_oracle`]: grid search over a small null space, for tests.

mod dual_newton;
mod frontier;
mod oracle;
mod prepared;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::norms::{lp_norm, NormSpec};
use crate::rng::Design;

pub(crate) use frontier::min_l2_in_ball_prepared;
pub use frontier::{
    gauge_projected_truncated, solve_min_l2_in_ball, FrontierPoint, FrontierSolver, TruncatedGauge, BALL_RTOL,
};
pub use oracle::brute_force_oracle;
pub use prepared::PreparedDesign;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverOptions {
    /// Bound on ‖Xw − y‖₂ / max(‖y‖₂, 1).
    #[serde(default = "default_tol")]
    pub tol_feasibility: f64,
    /// Bound on the duality gap relative to max(‖w‖, 1).
    #[serde(default = "default_tol")]
    pub tol_kkt: f64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: usize,
    /// Number of intermediate exponents between 2 and the target. `None`
    /// resolves to max(8, ⌈4/(p−1)⌉).
    #[serde(default)]
    pub homotopy_steps: Option<usize>,
}

fn default_tol() -> f64 {
    1e-8
}

fn default_max_iterations() -> usize {
    500
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol_feasibility: default_tol(),
            tol_kkt: default_tol(),
            max_iterations: default_max_iterations(),
            homotopy_steps: None,
        }
    }
}

impl SolverOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol_feasibility > 0.0) || !(self.tol_kkt > 0.0) {
            return Err(Error::Config("solver tolerances must be > 0".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be >= 1".into()));
        }
        if self.homotopy_steps == Some(0) {
            return Err(Error::Config("homotopy_steps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn resolved_homotopy_steps(&self, p: f64) -> usize {
        self.homotopy_steps.unwrap_or_else(|| ((4.0 / (p - 1.0)).ceil() as usize).max(8))
    }

    /// The same options with `homotopy_steps` materialized for exponent `p`.
    pub fn resolved(&self, p: f64) -> Self {
        Self { homotopy_steps: Some(self.resolved_homotopy_steps(p)), ..*self }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolveStatus {
    Converged,
    MaxIter,
    /// The constraint set is empty; `min_norm` is the smallest norm any
    /// interpolator achieves.
    Infeasible {
        min_norm: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MniSolution {
    pub weights: DVector<f64>,
    /// ‖weights‖ in the problem's norm.
    pub norm_value: f64,
    pub l2_norm: f64,
    pub feasibility_residual: f64,
    pub duality_gap: f64,
    pub iterations: usize,
    pub status: SolveStatus,
}

impl MniSolution {
    pub fn is_converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub(crate) fn assemble(
        weights: DVector<f64>,
        p: f64,
        feasibility_residual: f64,
        duality_gap: f64,
        iterations: usize,
        status: SolveStatus,
    ) -> Self {
        let norm_value = lp_norm(weights.as_slice(), p);
        let l2_norm = lp_norm(weights.as_slice(), 2.0);
        Self { weights, norm_value, l2_norm, feasibility_residual, duality_gap, iterations, status }
    }
}

#[derive(Debug, Clone)]
pub struct InterpolationProblem {
    pub design: Design,
    pub targets: DVector<f64>,
    pub norm: NormSpec,
}

impl InterpolationProblem {
    pub fn new(design: Design, targets: DVector<f64>, norm: NormSpec) -> Result<Self> {
        let problem = Self { design, targets, norm };
        problem.validate()?;
        Ok(problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.norm.validate()?;
        if self.targets.len() != self.design.n() {
            return Err(Error::DimensionMismatch { expected: self.design.n(), found: self.targets.len() });
        }
        if self.norm.dimension != self.design.d() {
            return Err(Error::DimensionMismatch { expected: self.design.d(), found: self.norm.dimension });
        }
        Ok(())
    }
}

pub(crate) fn relative_residual(prep: &PreparedDesign, w: &DVector<f64>, y: &DVector<f64>) -> f64 {
    (prep.apply(w) - y).norm() / y.norm().max(1.0)
}

/// A reusable minimum-norm solver for one design: the factorization is
/// computed once and shared by every right-hand side.
#[derive(Debug, Clone)]
pub struct MinNormSolver {
    prep: PreparedDesign,
    norm: NormSpec,
    opts: SolverOptions,
}

impl MinNormSolver {
    pub fn new(design: &Design, norm: NormSpec, opts: SolverOptions) -> Result<Self> {
        Self::from_prepared(PreparedDesign::new(design)?, norm, opts)
    }

    pub fn from_prepared(prep: PreparedDesign, norm: NormSpec, opts: SolverOptions) -> Result<Self> {
        norm.validate()?;
        opts.validate()?;
        if norm.dimension != prep.d() {
            return Err(Error::DimensionMismatch { expected: prep.d(), found: norm.dimension });
        }
        Ok(Self { prep, norm, opts })
    }

    pub fn prepared(&self) -> &PreparedDesign {
        &self.prep
    }

    pub fn norm(&self) -> &NormSpec {
        &self.norm
    }

    pub fn options(&self) -> &SolverOptions {
        &self.opts
    }

    pub fn solve(&self, targets: &DVector<f64>) -> Result<MniSolution> {
        if targets.len() != self.prep.n() {
            return Err(Error::DimensionMismatch { expected: self.prep.n(), found: targets.len() });
        }
        let p = self.norm.exponent();
        if p == 2.0 {
            Ok(dual_newton::solve_euclidean(&self.prep, targets))
        } else {
            Ok(dual_newton::solve_lp(&self.prep, targets, p, &self.opts))
        }
    }
}

/// argmin ‖w‖ subject to Xw = y.
///
/// p = 2 uses the thin QR factorization of Xᵀ. For p ∈ (1, 2) the concave
/// dual max_λ ⟨y, λ⟩ − (1/q)‖Xᵀλ‖_q^q is maximized by damped Newton, warm
/// started along a decreasing exponent schedule from 2 down to p, and the
/// primal point w_i = sign(z_i)|z_i|^{q−1}, z = Xᵀλ, is returned after a
/// Euclidean correction onto the affine set. The reported duality gap is
/// certified: ‖w‖_p minus the lower bound ⟨y, λ⟩/‖Xᵀλ‖_q.
pub fn solve_min_norm(problem: &InterpolationProblem, opts: &SolverOptions) -> Result<MniSolution> {
    problem.validate()?;
    MinNormSolver::new(&problem.design, problem.norm, *opts)?.solve(&problem.targets)
}
