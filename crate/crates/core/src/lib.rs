//! Minimum-norm interpolation for ℓp norms, p ∈ (1, 2].
//!
//! The crate is organized bottom-up:
//!
//! - [`rng`]: keyed, reproducible designs and noise.
//! - [`norms`]: ℓp norms, duals and curvature predicates.
//! - [`solvers`]: the ℓp minimum-norm interpolator and auxiliary programs.
//! - [`geometry`]: Monte Carlo means, complexities and dyadic diagnostics of
//!   the projected unit ball.
//! - [`decomposition`]: nested Monte Carlo estimates of the MSE terms.
//! - [`experiments`]: config-driven rate experiments with CSV/JSON output.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod decomposition;
pub mod error;
pub mod experiments;
pub mod geometry;
pub mod norms;
pub mod rng;
pub mod solvers;
pub mod stats;

pub use error::{Error, Result};
pub use norms::{CurvatureConstants, NormSpec};
pub use rng::{Design, DesignSpec, Distribution, NoiseKind, Scaling, StreamKey};
pub use solvers::{InterpolationProblem, MinNormSolver, MniSolution, SolveStatus, SolverOptions};
