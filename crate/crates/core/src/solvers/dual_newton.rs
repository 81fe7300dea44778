//! Damped Newton on the smooth dual of min (1/p)‖w‖_p^p s.t. Xw = y.

use nalgebra::{DMatrix, DVector};

use super::prepared::PreparedDesign;
use super::{relative_residual, MniSolution, SolveStatus, SolverOptions};
use crate::norms::{abs_pow, conjugate, lp_norm};
use crate::stats::pairwise_sum;

const ARMIJO: f64 = 1e-4;
const BACKTRACK: f64 = 0.5;
const MAX_BACKTRACKS: usize = 60;
/// Intermediate homotopy stages stop at this relative dual gradient.
const STAGE_TOL: f64 = 1e-3;
const STAGE_MAX_STEPS: usize = 4;
/// Once the tolerances are met, Newton keeps polishing until the relative dual
/// gradient falls below this level or the polish budget runs out. The gap is
/// second order in the weight error, the gradient first order.
const POLISH_GRADIENT: f64 = 1e-13;
const MAX_POLISH: usize = 3;

pub(crate) fn solve_euclidean(prep: &PreparedDesign, y: &DVector<f64>) -> MniSolution {
    let w = prep.least_norm(y);
    let lambda = prep.gram_solve(y);
    let z = prep.apply_t(&lambda);
    let zn = z.norm();
    let lower = if zn > 0.0 { y.dot(&lambda) / zn } else { 0.0 };
    let residual = relative_residual(prep, &w, y);
    let norm = w.norm();
    MniSolution::assemble(w, 2.0, residual, norm - lower, 0, SolveStatus::Converged)
}

/// Evaluation of the dual at z = Xᵀλ for exponent q.
struct DualPoint {
    /// w_i = sign(z_i)|z_i|^{q−1}
    w: DVector<f64>,
    /// |z_i|^{q−2}
    curvature: Vec<f64>,
    /// Σ|z_i|^q
    power_sum: f64,
}

fn evaluate(z: &DVector<f64>, q: f64) -> DualPoint {
    let d = z.len();
    let mut w = DVector::zeros(d);
    let mut curvature = Vec::with_capacity(d);
    let mut powers = Vec::with_capacity(d);
    for (i, &zi) in z.iter().enumerate() {
        let a = zi.abs();
        let h = abs_pow(a, q - 2.0);
        let wi = h * a;
        w[i] = wi.copysign(zi);
        curvature.push(h);
        powers.push(wi * a);
    }
    DualPoint { w, curvature, power_sum: pairwise_sum(&powers) }
}

fn power_sum(z: &DVector<f64>, q: f64) -> f64 {
    let terms: Vec<f64> = z.iter().map(|&v| abs_pow(v, q)).collect();
    pairwise_sum(&terms)
}

/// Cholesky solve of (H + εI)x = b with ε = 1e-12·tr(H)/n, escalating ε if
/// the factorization fails.
pub(crate) fn regularized_solve(mut h: DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    let n = h.nrows();
    let trace = h.trace();
    let mut eps = 1e-12 * (trace / n as f64).max(f64::MIN_POSITIVE);
    for _ in 0..8 {
        let mut reg = h.clone();
        for i in 0..n {
            reg[(i, i)] += eps;
        }
        if let Some(chol) = reg.cholesky() {
            return Some(chol.solve(b));
        }
        eps *= 100.0;
    }
    for i in 0..n {
        h[(i, i)] += eps;
    }
    h.lu().solve(b)
}

struct Certificate {
    weights: DVector<f64>,
    residual: f64,
    gap: f64,
    norm: f64,
}

fn certify(
    prep: &PreparedDesign,
    y: &DVector<f64>,
    lambda: &DVector<f64>,
    z: &DVector<f64>,
    w: &DVector<f64>,
    p: f64,
    q: f64,
) -> Certificate {
    let weights = prep.project_affine(w, y);
    let residual = relative_residual(prep, &weights, y);
    let norm = lp_norm(weights.as_slice(), p);
    let zq = lp_norm(z.as_slice(), q);
    let lower = if zq > 0.0 { y.dot(lambda) / zq } else { 0.0 };
    Certificate { weights, residual, gap: norm - lower, norm }
}

pub(crate) fn solve_lp(prep: &PreparedDesign, y: &DVector<f64>, p: f64, opts: &SolverOptions) -> MniSolution {
    let d = prep.d();
    if y.iter().all(|&v| v == 0.0) {
        return MniSolution::assemble(DVector::zeros(d), p, 0.0, 0.0, 0, SolveStatus::Converged);
    }
    let y_scale = y.norm();
    let stages = opts.resolved_homotopy_steps(p);

    let mut lambda = prep.gram_solve(y);
    let mut z = prep.apply_t(&lambda);
    let mut iterations = 0usize;
    let mut best: Option<Certificate> = None;

    for stage in 1..=stages {
        let final_stage = stage == stages;
        let p_stage = if final_stage { p } else { 2.0 + (p - 2.0) * stage as f64 / stages as f64 };
        let q = conjugate(p_stage);

        // Optimal rescaling of λ for the new exponent: maximize g(cλ) over c.
        let yl = y.dot(&lambda);
        let ps = power_sum(&z, q);
        if yl > 0.0 && ps > 0.0 && ps.is_finite() {
            let c = (yl / ps).powf(1.0 / (q - 1.0));
            lambda *= c;
            z *= c;
        }

        let mut stage_steps = 0usize;
        let mut polish = 0usize;
        loop {
            let point = evaluate(&z, q);
            let grad = y - prep.apply(&point.w);

            if final_stage {
                let cert = certify(prep, y, &lambda, &z, &point.w, p, q);
                if meets(&cert, opts) || best.as_ref().is_none_or(|b| cert.gap < b.gap) {
                    best = Some(cert);
                }
                if meets(best.as_ref().unwrap(), opts) {
                    if grad.norm() <= POLISH_GRADIENT * y_scale || polish >= MAX_POLISH {
                        break;
                    }
                    polish += 1;
                }
            } else if grad.norm() <= STAGE_TOL * y_scale || stage_steps >= STAGE_MAX_STEPS {
                break;
            }
            if iterations >= opts.max_iterations {
                break;
            }

            let hessian = prep.weighted_gram(&point.curvature) * (q - 1.0);
            let Some(step) = regularized_solve(hessian, &grad) else {
                break;
            };
            let dz = prep.apply_t(&step);
            let slope = grad.dot(&step);
            if !(slope > 0.0) {
                break;
            }
            let objective = y.dot(&lambda) - point.power_sum / q;
            let y_step = y.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..MAX_BACKTRACKS {
                let trial = &z + &dz * t;
                let value = y.dot(&lambda) + t * y_step - power_sum(&trial, q) / q;
                // Near the optimum the objective change drowns in rounding;
                // the full Newton step is then taken as-is.
                if value >= objective + ARMIJO * t * slope || (t == 1.0 && slope <= 1e-13 * objective.abs()) {
                    accepted = true;
                    break;
                }
                t *= BACKTRACK;
            }
            if !accepted {
                break;
            }
            lambda.axpy(t, &step, 1.0);
            z.axpy(t, &dz, 1.0);
            iterations += 1;
            stage_steps += 1;
        }
        if final_stage || iterations >= opts.max_iterations {
            break;
        }
    }

    let q = conjugate(p);
    let cert = match best {
        Some(b) => b,
        None => {
            let point = evaluate(&z, q);
            certify(prep, y, &lambda, &z, &point.w, p, q)
        }
    };
    let status = if meets(&cert, opts) { SolveStatus::Converged } else { SolveStatus::MaxIter };
    MniSolution::assemble(cert.weights, p, cert.residual, cert.gap, iterations, status)
}

fn meets(cert: &Certificate, opts: &SolverOptions) -> bool {
    cert.residual <= opts.tol_feasibility && cert.gap <= opts.tol_kkt * cert.norm.max(1.0)
}
