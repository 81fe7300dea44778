use nalgebra::DVector;

use super::prepared::PreparedDesign;
use super::{relative_residual, InterpolationProblem, MniSolution, SolveStatus};
use crate::error::{Error, Result};
use crate::norms::{abs_pow, lp_norm};

const MAX_NULL_DIM: usize = 3;
const MAX_RESOLUTION: usize = 1000;
const GOLDEN: f64 = 0.618_033_988_749_894_8;

/// Independent test oracle for [`super::solve_min_norm`].
///
/// Parameterizes {w : Xw = y} as w₀ + N t with w₀ the ℓ2-MNI and N an
/// orthonormal null-space basis, grid-searches t over the box
/// ‖t‖_∞ ≤ ‖w₀‖ + ‖w₀‖₂ (which contains the minimizer because ‖·‖₂ ≤ ‖·‖_p
/// for p ≤ 2), then polishes with exact line searches along the axes and
/// their pairwise diagonals.
pub fn brute_force_oracle(problem: &InterpolationProblem, resolution: usize) -> Result<MniSolution> {
    problem.validate()?;
    let (n, d) = (problem.design.n(), problem.design.d());
    if d < n || d - n > MAX_NULL_DIM {
        return Err(Error::Unsupported(format!(
            "brute force needs a null space of dimension <= {MAX_NULL_DIM}, got d - n = {}",
            d as i64 - n as i64
        )));
    }
    if !(2..=MAX_RESOLUTION).contains(&resolution) {
        return Err(Error::Config(format!("resolution must lie in 2..={MAX_RESOLUTION}, got {resolution}")));
    }
    let prep = PreparedDesign::new(&problem.design)?;
    let p = problem.norm.exponent();
    let y = &problem.targets;
    let w0 = prep.least_norm(y);
    let k = d - n;
    if k == 0 {
        let res = relative_residual(&prep, &w0, y);
        return Ok(MniSolution::assemble(w0, p, res, 0.0, 0, SolveStatus::Converged));
    }
    let basis = prep.null_space();
    let objective = |t: &[f64]| -> f64 {
        let w = &w0 + &basis * DVector::from_column_slice(t);
        lp_norm(w.as_slice(), p)
    };

    let bound = lp_norm(w0.as_slice(), p) + w0.norm();
    let step = 2.0 * bound / (resolution - 1) as f64;
    let mut best_t = vec![0.0; k];
    let mut best = objective(&best_t);
    let mut idx = vec![0usize; k];
    let mut evaluations = 0usize;
    loop {
        let t: Vec<f64> = idx.iter().map(|&i| -bound + step * i as f64).collect();
        let value = objective(&t);
        evaluations += 1;
        if value < best {
            best = value;
            best_t = t;
        }
        let mut axis = 0;
        while axis < k {
            idx[axis] += 1;
            if idx[axis] < resolution {
                break;
            }
            idx[axis] = 0;
            axis += 1;
        }
        if axis == k {
            break;
        }
    }

    let mut directions: Vec<Vec<f64>> = (0..k).map(|i| (0..k).map(|j| (i == j) as u8 as f64).collect()).collect();
    for i in 0..k {
        for j in (i + 1)..k {
            let s = std::f64::consts::FRAC_1_SQRT_2;
            directions.push((0..k).map(|m| if m == i || m == j { s } else { 0.0 }).collect());
            directions.push(
                (0..k)
                    .map(|m| {
                        if m == i {
                            s
                        } else if m == j {
                            -s
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            );
        }
    }
    let mut width = 2.0 * step;
    for _ in 0..400 {
        let before = best;
        for dir in &directions {
            let along = |s: f64| -> f64 {
                let t: Vec<f64> = best_t.iter().zip(dir).map(|(a, b)| a + s * b).collect();
                objective(&t)
            };
            let s = golden_section(along, -width, width, 1e-14 * bound.max(1e-300));
            let value = along(s);
            evaluations += 1;
            if value < best {
                best = value;
                best_t.iter_mut().zip(dir).for_each(|(a, b)| *a += s * b);
            }
        }
        if before - best <= 1e-16 * best {
            width *= 0.5;
            if width < 1e-13 * bound {
                break;
            }
        }
    }

    let w = &w0 + &basis * DVector::from_column_slice(&best_t);
    let residual = relative_residual(&prep, &w, y);
    let gap = best - dual_lower_bound(&prep, &w, y, p);
    Ok(MniSolution::assemble(w, p, residual, gap, evaluations, SolveStatus::Converged))
}

/// ⟨y, λ⟩ / ‖Xᵀλ‖_q with Xᵀλ the row-space part of the norm's gradient at w.
fn dual_lower_bound(prep: &PreparedDesign, w: &DVector<f64>, y: &DVector<f64>, p: f64) -> f64 {
    let grad = w.map(|v| v.signum() * abs_pow(v, p - 1.0));
    let lambda = prep.gram_solve(&prep.apply(&grad));
    let z: DVector<f64> = prep.apply_t(&lambda);
    let q = crate::norms::conjugate(p);
    let zq = lp_norm(z.as_slice(), q);
    if zq > 0.0 {
        y.dot(&lambda) / zq
    } else {
        0.0
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let mut c = b - GOLDEN * (b - a);
    let mut d = a + GOLDEN * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - GOLDEN * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + GOLDEN * (b - a);
            fd = f(d);
        }
    }
    let mid = 0.5 * (a + b);
    if f(0.0) <= f(mid) {
        0.0
    } else {
        mid
    }
}
