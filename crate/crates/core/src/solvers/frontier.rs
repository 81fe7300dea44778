//! The Pareto frontier between ‖w‖₂ and ‖w‖_p over {w : Xw = v}.
//!
//! Points on the frontier solve min ½‖w‖₂² + (μ/p)‖w‖_p^p s.t. Xw = v for a
//! multiplier μ ≥ 0. As μ grows, ‖w(μ)‖_p decreases from the ℓ2-MNI value
//! to the ℓp-MNI value while ‖w(μ)‖₂ increases. Both the ball-constrained ℓ2
//! problem and the truncated gauge reduce to a 1-D search over μ.

use nalgebra::DVector;

use super::dual_newton::regularized_solve;
use super::prepared::PreparedDesign;
use super::{relative_residual, MinNormSolver, MniSolution, SolveStatus, SolverOptions};
use crate::error::{Error, Result};
use crate::norms::{abs_pow, lp_norm, NormSpec};
use crate::rng::Design;
use crate::stats::pairwise_sum;

/// Relative accuracy at which the ball constraint counts as met.
pub const BALL_RTOL: f64 = 1e-6;
const MAX_BISECTIONS: usize = 60;
const INNER_MAX_STEPS: usize = 60;
const INNER_TOL: f64 = 1e-11;

/// Root of a + μ a^{p−1} = b for b ≥ 0, μ > 0, p ∈ (1, 2).
fn shrink(b: f64, mu: f64, p: f64) -> f64 {
    if b == 0.0 {
        return 0.0;
    }
    let mut hi = b.min((b / mu).powf(1.0 / (p - 1.0)));
    let mut lo = 0.0;
    let mut a = hi;
    for _ in 0..100 {
        let ap = abs_pow(a, p - 2.0);
        let f = a + mu * ap * a - b;
        if f == 0.0 {
            return a;
        }
        if f > 0.0 {
            hi = a;
        } else {
            lo = a;
        }
        let next = a - f / (1.0 + mu * (p - 1.0) * ap);
        let next = if next > lo && next < hi { next } else { 0.5 * (lo + hi) };
        if (next - a).abs() <= 4.0 * f64::EPSILON * a {
            return next;
        }
        a = next;
    }
    a
}

struct FrontierEval {
    w: DVector<f64>,
    slope: Vec<f64>,
    conjugate_sum: f64,
}

fn evaluate(z: &DVector<f64>, mu: f64, p: f64) -> FrontierEval {
    let d = z.len();
    let mut w = DVector::zeros(d);
    let mut slope = Vec::with_capacity(d);
    let mut conj = Vec::with_capacity(d);
    for (i, &zi) in z.iter().enumerate() {
        let b = zi.abs();
        let a = shrink(b, mu, p);
        w[i] = a.copysign(zi);
        slope.push(if a > 0.0 { 1.0 / (1.0 + mu * (p - 1.0) * abs_pow(a, p - 2.0)) } else { 0.0 });
        conj.push(b * a - 0.5 * a * a - mu / p * abs_pow(a, p));
    }
    FrontierEval { w, slope, conjugate_sum: pairwise_sum(&conj) }
}

/// A point on the frontier.
#[derive(Debug, Clone)]
pub struct FrontierPoint {
    pub mu: f64,
    pub weights: DVector<f64>,
    pub lp: f64,
    pub l2: f64,
    pub residual: f64,
    pub gap: f64,
    pub converged: bool,
}

/// Solves the penalized program for successive multipliers, warm starting
/// the dual variable from the previous solve.
pub struct FrontierSolver<'a> {
    prep: &'a PreparedDesign,
    v: DVector<f64>,
    p: f64,
    lambda: DVector<f64>,
    pub iterations: usize,
}

impl<'a> FrontierSolver<'a> {
    pub fn new(prep: &'a PreparedDesign, v: &DVector<f64>, p: f64) -> Self {
        let lambda = prep.gram_solve(v);
        Self { prep, v: v.clone(), p, lambda, iterations: 0 }
    }

    pub fn solve(&mut self, mu: f64) -> FrontierPoint {
        let (prep, p) = (self.prep, self.p);
        let v = &self.v;
        let v_scale = v.norm().max(f64::MIN_POSITIVE);
        let mut z = prep.apply_t(&self.lambda);
        let mut converged = false;
        for _ in 0..INNER_MAX_STEPS {
            let eval = evaluate(&z, mu, p);
            let grad = v - prep.apply(&eval.w);
            if grad.norm() <= INNER_TOL * v_scale {
                converged = true;
                break;
            }
            let h = prep.weighted_gram(&eval.slope);
            let Some(step) = regularized_solve(h, &grad) else { break };
            let dz = prep.apply_t(&step);
            let slope = grad.dot(&step);
            if !(slope > 0.0) {
                break;
            }
            let objective = v.dot(&self.lambda) - eval.conjugate_sum;
            let v_step = v.dot(&step);
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..60 {
                let trial = evaluate(&(&z + &dz * t), mu, p);
                let value = v.dot(&self.lambda) + t * v_step - trial.conjugate_sum;
                if value >= objective + 1e-4 * t * slope || (t == 1.0 && slope <= 1e-13 * objective.abs()) {
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            self.lambda.axpy(t, &step, 1.0);
            z.axpy(t, &dz, 1.0);
            self.iterations += 1;
        }
        let eval = evaluate(&z, mu, p);
        let weights = prep.project_affine(&eval.w, v);
        let residual = relative_residual(prep, &weights, v);
        let lp = lp_norm(weights.as_slice(), p);
        let l2 = lp_norm(weights.as_slice(), 2.0);
        let primal = 0.5 * l2 * l2 + mu / p * lp.powf(p);
        let dual = v.dot(&self.lambda) - eval.conjugate_sum;
        FrontierPoint { mu, weights, lp, l2, residual, gap: primal - dual, converged }
    }
}

/// Multiplier at which the two terms of the penalty are balanced for the
/// typical entry size of `w`.
fn natural_mu(w: &DVector<f64>, p: f64) -> f64 {
    let typical = w.norm() / (w.len() as f64).sqrt();
    if typical > 0.0 {
        typical.powf(2.0 - p)
    } else {
        1.0
    }
}

fn check_inputs(design: &Design, v: &DVector<f64>, norm: &NormSpec, r: f64) -> Result<()> {
    norm.validate()?;
    if !(r > 0.0) {
        return Err(Error::Config(format!("radius must be > 0, got {r}")));
    }
    if v.len() != design.n() {
        return Err(Error::DimensionMismatch { expected: design.n(), found: v.len() });
    }
    if norm.dimension != design.d() {
        return Err(Error::DimensionMismatch { expected: design.d(), found: norm.dimension });
    }
    Ok(())
}

/// argmin ‖w‖₂ subject to Xw = v and ‖w‖ ≤ r.
///
/// Returns the ℓ2-MNI when it already lies in the ball, an `Infeasible`
/// status carrying min ‖w‖ when r is below it, and otherwise bisects on the
/// multiplier until ‖w(μ)‖ = r to relative [`BALL_RTOL`].
pub fn solve_min_l2_in_ball(
    design: &Design,
    v: &DVector<f64>,
    norm: &NormSpec,
    r: f64,
    opts: &SolverOptions,
) -> Result<MniSolution> {
    check_inputs(design, v, norm, r)?;
    let prep = PreparedDesign::new(design)?;
    min_l2_in_ball_prepared(&prep, v, norm, r, opts)
}

pub(crate) fn min_l2_in_ball_prepared(
    prep: &PreparedDesign,
    v: &DVector<f64>,
    norm: &NormSpec,
    r: f64,
    opts: &SolverOptions,
) -> Result<MniSolution> {
    let p = norm.exponent();
    let limit = r * (1.0 + BALL_RTOL);
    let w0 = prep.least_norm(v);
    let w0_norm = lp_norm(w0.as_slice(), p);
    if w0_norm <= limit {
        let res = relative_residual(prep, &w0, v);
        return Ok(MniSolution::assemble(w0, p, res, 0.0, 0, SolveStatus::Converged));
    }
    if p == 2.0 {
        let res = relative_residual(prep, &w0, v);
        return Ok(MniSolution::assemble(w0, p, res, 0.0, 0, SolveStatus::Infeasible { min_norm: w0_norm }));
    }

    let mni = MinNormSolver::from_prepared(prep.clone(), *norm, *opts)?.solve(v)?;
    if mni.norm_value > limit {
        let min_norm = mni.norm_value;
        return Ok(MniSolution { status: SolveStatus::Infeasible { min_norm }, ..mni });
    }
    if mni.norm_value >= r * (1.0 - BALL_RTOL) {
        // The ball barely contains the ℓp-MNI, which is then the only candidate.
        return Ok(mni);
    }

    let mut solver = FrontierSolver::new(prep, v, p);
    let excess = |pt: &FrontierPoint| pt.lp - r;

    let mut mu = natural_mu(&w0, p);
    let mut pt = solver.solve(mu);
    let (mut lo, mut hi, mut feasible);
    if excess(&pt) > 0.0 {
        lo = mu;
        loop {
            mu *= 10.0;
            pt = solver.solve(mu);
            if excess(&pt) <= 0.0 || mu > 1e300 {
                break;
            }
            lo = mu;
        }
        hi = mu;
        feasible = pt;
    } else {
        hi = mu;
        feasible = pt;
        loop {
            mu /= 10.0;
            pt = solver.solve(mu);
            if excess(&pt) > 0.0 || mu < 1e-300 {
                break;
            }
            hi = mu;
            feasible = pt;
        }
        lo = mu;
    }

    let mut met = excess(&feasible).abs() <= BALL_RTOL * r;
    for _ in 0..MAX_BISECTIONS {
        if met {
            break;
        }
        let mid = (lo * hi).sqrt();
        let pt = solver.solve(mid);
        if excess(&pt) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
            feasible = pt;
            met = excess(&feasible).abs() <= BALL_RTOL * r;
        }
    }
    let status = if met && feasible.converged { SolveStatus::Converged } else { SolveStatus::MaxIter };
    let iterations = solver.iterations + mni.iterations;
    Ok(MniSolution::assemble(feasible.weights, p, feasible.residual, feasible.gap, iterations, status))
}

/// The gauge of X(B ∩ r·B₂) at ξ: min over {w : Xw = ξ} of max(‖w‖, ‖w‖₂/r).
///
/// Computed as a single root search on the frontier where ‖w(μ)‖₂/r = ‖w(μ)‖.
/// The two endpoints (ℓ2-MNI, ℓp-MNI) settle the cases where one term
/// dominates everywhere.
pub fn gauge_projected_truncated(
    design: &Design,
    xi: &DVector<f64>,
    norm: &NormSpec,
    r: f64,
    opts: &SolverOptions,
) -> Result<f64> {
    check_inputs(design, xi, norm, r)?;
    let prep = PreparedDesign::new(design)?;
    TruncatedGauge::new(&prep, xi, norm, opts)?.at(r)
}

/// Truncated gauge of a fixed ξ, reusable across radii.
pub struct TruncatedGauge<'a> {
    prep: &'a PreparedDesign,
    xi: DVector<f64>,
    p: f64,
    l2_mni: (f64, f64),
    lp_mni: (f64, f64),
    mu_hint: f64,
}

impl<'a> TruncatedGauge<'a> {
    pub fn new(prep: &'a PreparedDesign, xi: &DVector<f64>, norm: &NormSpec, opts: &SolverOptions) -> Result<Self> {
        let p = norm.exponent();
        let w0 = prep.least_norm(xi);
        let l2_mni = (lp_norm(w0.as_slice(), p), w0.norm());
        let lp_mni = if p == 2.0 {
            l2_mni
        } else {
            let sol = MinNormSolver::from_prepared(prep.clone(), *norm, *opts)?.solve(xi)?;
            (sol.norm_value, sol.l2_norm)
        };
        Ok(Self { prep, xi: xi.clone(), p, l2_mni, lp_mni, mu_hint: natural_mu(&w0, p) })
    }

    /// ‖ξ‖ in the untruncated projected ball.
    pub fn untruncated(&self) -> f64 {
        self.lp_mni.0
    }

    /// Radius above which truncation no longer binds.
    pub fn inactive_radius(&self) -> f64 {
        self.lp_mni.1 / self.lp_mni.0
    }

    pub fn at(&self, r: f64) -> Result<f64> {
        if !(r > 0.0) {
            return Err(Error::Config(format!("radius must be > 0, got {r}")));
        }
        let (l2_lp, l2_l2) = self.l2_mni;
        if l2_l2 / r >= l2_lp {
            return Ok(l2_l2 / r);
        }
        let (lp_lp, lp_l2) = self.lp_mni;
        if lp_l2 / r <= lp_lp {
            return Ok(lp_lp);
        }
        let mut solver = FrontierSolver::new(self.prep, &self.xi, self.p);
        let balance = |pt: &FrontierPoint| pt.l2 / r - pt.lp;
        let value = |pt: &FrontierPoint| pt.lp.max(pt.l2 / r);

        let mut mu = self.mu_hint;
        let mut pt = solver.solve(mu);
        let mut best = value(&pt);
        let (mut lo, mut hi);
        if balance(&pt) < 0.0 {
            lo = mu;
            loop {
                mu *= 10.0;
                pt = solver.solve(mu);
                best = best.min(value(&pt));
                if balance(&pt) >= 0.0 || mu > 1e300 {
                    break;
                }
                lo = mu;
            }
            hi = mu;
        } else {
            hi = mu;
            loop {
                mu /= 10.0;
                pt = solver.solve(mu);
                best = best.min(value(&pt));
                if balance(&pt) < 0.0 || mu < 1e-300 {
                    break;
                }
                hi = mu;
            }
            lo = mu;
        }
        for _ in 0..100 {
            let mid = (lo * hi).sqrt();
            let pt = solver.solve(mid);
            best = best.min(value(&pt));
            let b = balance(&pt);
            if b.abs() <= 1e-10 * pt.lp || hi / lo < 1.0 + 1e-12 {
                break;
            }
            if b < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(best)
    }
}
