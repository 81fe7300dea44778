use approx::assert_relative_eq;
use mni_core::decomposition::*;
use mni_core::norms::NormSpec;
use mni_core::rng::{sample_design, standard_normal, streams};
use mni_core::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn key(seed: u64) -> StreamKey {
    StreamKey::new(seed, 0, 0)
}

fn opts() -> SolverOptions {
    SolverOptions::default()
}

fn v(xs: &[f64]) -> DVector<f64> {
    DVector::from_column_slice(xs)
}

#[test]
fn projection_examples() {
    let w_star = v(&[0.3, -1.0, 2.0]);
    let pr = project_onto_signal(&w_star, &w_star).unwrap();
    assert_relative_eq!(pr.coefficient, 1.0, max_relative = 1e-15);
    assert!(pr.orthogonal.norm() <= 1e-15);

    let pr = project_onto_signal(&v(&[2.0, 0.6, 0.0]), &w_star).unwrap();
    assert_relative_eq!(pr.coefficient, 0.0, epsilon = 1e-15);

    let pr = project_onto_signal(&v(&[1.0, 1.0]), &v(&[1.0, 0.0])).unwrap();
    assert_eq!(pr.coefficient, 1.0);
    assert_eq!(pr.orthogonal, v(&[0.0, 1.0]));
    assert!(project_onto_signal(&v(&[1.0, 1.0]), &v(&[0.0, 0.0])).is_err());
}

#[test]
fn ground_truth_bounds() {
    let norm = NormSpec::lp(1.5, 4).unwrap();
    assert!(GroundTruth::e1(&norm).is_ok());
    assert!(GroundTruth::sparse(4, &[1], &[3.0], &norm).is_err());
    assert!(GroundTruth::sparse(4, &[1], &[0.1], &norm).is_err());
    assert!(GroundTruth::sparse(4, &[7], &[1.0], &norm).is_err());
    let t = GroundTruth::sparse(4, &[0, 2], &[0.6, -0.6], &norm).unwrap();
    assert_eq!(t.sparsity, 2);
    assert!(GroundTruth::zero(4).is_zero());
}

#[test]
fn scalar_model_decomposes_exactly() {
    let norm = NormSpec::euclidean(1);
    let truth = GroundTruth::new(v(&[1.0]), &norm).unwrap();
    let source = DesignSource::Fixed(Design::identity(1));
    let noise = NoiseKind::Gaussian { variance: 1.0 };
    let rep = estimate_decomposition(&source, &norm, &truth, noise, 200, 200, key(1), &opts()).unwrap();
    assert!(rep.e1.within(0.0, 3.0), "{rep:?}");
    assert!(rep.e2.within(0.0, 3.0) || rep.e2.mean.abs() <= 1e-12, "{rep:?}");
    assert!(rep.t2.within(1.0, 3.0), "{rep:?}");
    assert!(rep.mse.within(1.0, 3.0), "{rep:?}");
    assert!(rep.is_consistent(3.0));
}

#[test]
fn square_design_has_no_structural_error() {
    let x = Design::from_rows(3, 3, &[2.0, 0.5, 0.0, 0.3, 1.5, -0.4, 0.0, 0.2, 1.0]).unwrap();
    let inv = x.matrix.clone().try_inverse().unwrap();
    let expected_t2 = inv.norm_squared();
    for p in [1.5, 2.0] {
        let norm = NormSpec::lp(p, 3).unwrap();
        let truth = GroundTruth::new(v(&[0.0, 1.0, 0.0]), &norm).unwrap();
        let source = DesignSource::Fixed(x.clone());
        let rep =
            estimate_decomposition(&source, &norm, &truth, NoiseKind::standard(), 50, 200, key(2), &opts()).unwrap();
        assert!(rep.t1.within(0.0, 3.0), "p={p}: {rep:?}");
        assert!(rep.t2.within(expected_t2, 3.0), "p={p}: {rep:?} vs {expected_t2}");
    }
}

#[test]
fn pseudoinverse_split_matches_closed_form() {
    let norm = NormSpec::euclidean(2);
    let truth = GroundTruth::new(v(&[1.0, 0.0]), &norm).unwrap();
    let source = DesignSource::Fixed(Design::from_rows(1, 2, &[1.0, 1.0]).unwrap());
    let rep =
        estimate_decomposition(&source, &norm, &truth, NoiseKind::standard(), 1000, 1000, key(3), &opts()).unwrap();
    assert!(rep.e1.within(0.25, 3.0), "{rep:?}");
    assert!(rep.e2.within(0.25, 3.0), "{rep:?}");
    assert!(rep.t2.within(0.5, 3.0), "{rep:?}");
    assert!(rep.is_consistent(3.0));
}

#[test]
fn decomposition_identity_on_random_designs() {
    for (i, p) in [1.25, 1.5, 2.0].into_iter().enumerate() {
        let (n, d) = (6, 80);
        let norm = NormSpec::lp(p, d).unwrap();
        let truth = GroundTruth::e1(&norm).unwrap();
        let source = DesignSource::Random(DesignSpec::gaussian(n, d));
        let rep =
            estimate_decomposition(&source, &norm, &truth, NoiseKind::standard(), 20, 20, key(10 + i as u64), &opts())
                .unwrap();
        assert!(rep.is_consistent(3.0), "{rep:?}");
        assert!(rep.consistency_residual <= 1e-10 * rep.mse.mean);
        for term in [rep.e1, rep.e2, rep.t1, rep.t2, rep.mse] {
            assert!(term.mean >= -3.0 * term.stderr, "{rep:?}");
        }
        assert_eq!(rep.failures, 0);
    }
}

#[test]
fn decomposition_is_deterministic_and_rejects_bad_input() {
    let norm = NormSpec::lp(1.5, 20).unwrap();
    let truth = GroundTruth::e1(&norm).unwrap();
    let source = DesignSource::Random(DesignSpec::gaussian(3, 20));
    let a = estimate_decomposition(&source, &norm, &truth, NoiseKind::standard(), 4, 4, key(5), &opts()).unwrap();
    let b = estimate_decomposition(&source, &norm, &truth, NoiseKind::standard(), 4, 4, key(5), &opts()).unwrap();
    assert_eq!(a, b);
    assert!(estimate_decomposition(&source, &norm, &truth, NoiseKind::standard(), 1, 4, key(5), &opts()).is_err());
    let wrong = GroundTruth::e1(&NormSpec::lp(1.5, 21).unwrap()).unwrap();
    assert!(estimate_decomposition(&source, &norm, &wrong, NoiseKind::standard(), 4, 4, key(5), &opts()).is_err());
}

#[test]
fn pure_noise_has_zero_signal_loss() {
    let norm = NormSpec::lp(1.5, 30).unwrap();
    let source = DesignSource::Random(DesignSpec::gaussian(4, 30));
    let rep =
        estimate_decomposition(&source, &norm, &GroundTruth::zero(30), NoiseKind::standard(), 10, 10, key(6), &opts())
            .unwrap();
    assert_eq!(rep.e1.mean, 0.0);
    assert!(rep.is_consistent(3.0));
}

#[test]
fn hermite_recovers_linear_maps() {
    let mut worst: f64 = 0.0;
    for probe in 0..100u64 {
        let n = 1 + (probe % 4) as usize;
        let d = 1 + (probe % 8) as usize;
        let a = DMatrix::from_fn(d, n, |i, j| standard_normal(1, StreamKey::new(probe, 99, (i * n + j) as u64))[0]);
        let (coef, _) = estimate_hermite_map(n, |xi| Ok(&a * xi), 500, key(probe)).unwrap();
        for i in 0..n {
            for j in 0..d {
                let err = (coef.alpha[i][j] - a[(j, i)]).abs();
                let se = coef.stderr_per_coordinate[i][j];
                worst = worst.max(err / se.max(1e-300));
                assert!(err <= 4.0 * se + 1e-14, "probe {probe} ({i},{j}): err {err} se {se}");
            }
        }
    }
    assert!(worst > 0.0);
}

#[test]
fn hermite_of_euclidean_interpolator_is_pseudoinverse() {
    let (n, d) = (4, 16);
    let x = sample_design(DesignSpec::gaussian(n, d), StreamKey::new(20, streams::DESIGN, 0)).unwrap();
    let pinv = x.matrix.clone().pseudo_inverse(1e-12).unwrap();
    let norm = NormSpec::euclidean(d);
    let (coef, samples) = estimate_hermite(&x, &norm, &GroundTruth::zero(d), 10_000, key(21), &opts()).unwrap();
    for i in 0..n {
        for j in 0..d {
            let err = (coef.alpha[i][j] - pinv[(j, i)]).abs();
            assert!(err <= 3.0 * coef.stderr_per_coordinate[i][j] + 1e-14, "({i},{j})");
        }
    }
    for (res, se) in coef.interpolation_residuals(&x, &samples) {
        assert!(res <= 5.0 * se, "{res} vs {se}");
    }
}

#[test]
fn hermite_coefficients_interpolate_for_lp() {
    let (n, d) = (3, 12);
    let x = sample_design(DesignSpec::gaussian(n, d), StreamKey::new(22, streams::DESIGN, 0)).unwrap();
    let norm = NormSpec::lp(1.5, d).unwrap();
    let (coef, samples) = estimate_hermite(&x, &norm, &GroundTruth::zero(d), 2000, key(23), &opts()).unwrap();
    for (res, se) in coef.interpolation_residuals(&x, &samples) {
        assert!(res <= 5.0 * se, "{res} vs {se}");
    }
}

#[test]
fn psi_examples() {
    let source = DesignSource::Random(DesignSpec::gaussian(1, 1));
    let norm = NormSpec::lp(1.5, 1).unwrap();
    let psi = estimate_psi(&source, &v(&[1.0]), &norm, 1e9, 20_001, key(30), &opts()).unwrap();
    // Median of 1/|x| for x ~ N(0,1) is 1/Φ⁻¹(3/4).
    let oracle = 1.0 / 0.674_489_750_196_081_7;
    assert!((psi.median - oracle).abs() <= 0.02 * oracle, "{psi:?}");
    assert_eq!(psi.infeasible, 0);
    assert!(psi.lower_quartile <= psi.median && psi.median <= psi.upper_quartile);

    let (n, d) = (4, 40);
    let source = DesignSource::Random(DesignSpec::gaussian(n, d));
    let norm = NormSpec::lp(1.5, d).unwrap();
    let e1 = v(&[1.0, 0.0, 0.0, 0.0]);
    let base = estimate_psi(&source, &e1, &norm, 0.6, 21, key(31), &opts()).unwrap();
    let scaled = estimate_psi(&source, &(&e1 * 3.0), &norm, 1.8, 21, key(31), &opts()).unwrap();
    assert_relative_eq!(scaled.median, 3.0 * base.median, max_relative = 1e-5);

    let err = estimate_psi(&source, &e1, &norm, 1e-6, 11, key(31), &opts()).unwrap_err();
    assert!(matches!(err, Error::Estimator(_)));
}

#[test]
fn efron_stein_identity_design() {
    let n = 4;
    let norm = NormSpec::euclidean(n);
    let truth = GroundTruth::e1(&norm).unwrap();
    let source = DesignSource::Fixed(Design::identity(n));
    // With C = 1 the radius χ̄(n)/√n sits just below ‖e1‖ = 1, so the single
    // interpolator is excluded; C = 2 makes the ball inactive.
    let constants = EfronSteinConstants { constant: 2.0, ..Default::default() };
    for variance in [1.0, 4.0] {
        let noise = NoiseKind::Gaussian { variance };
        let check =
            reverse_efron_stein_check(&source, &norm, &truth, noise, 20, 100, &constants, key(40), &opts()).unwrap();
        assert!(check.lhs_t2.within(n as f64 * variance, 3.0), "{check:?}");
        assert_relative_eq!(check.bound.psi.median, variance.sqrt(), max_relative = 1e-12);
        assert_relative_eq!(check.bound.rhs_bound, n as f64 * variance, max_relative = 1e-12);
        assert!(check.satisfied);
    }
}

#[test]
fn efron_stein_lp_reports_both_sides() {
    let (n, d) = (32, 2048);
    let norm = NormSpec::lp(1.5, d).unwrap();
    let truth = GroundTruth::e1(&norm).unwrap();
    let source = DesignSource::Random(DesignSpec::gaussian(n, d));
    let constants = EfronSteinConstants::default();
    let check =
        reverse_efron_stein_check(&source, &norm, &truth, NoiseKind::standard(), 8, 8, &constants, key(41), &opts())
            .unwrap();
    assert!(check.lhs_t2.mean > 0.0 && check.bound.rhs_bound > 0.0);
    assert!(check.satisfied, "{check:?}");
}

#[test]
fn anderson_examples() {
    let norm = NormSpec::lp(1.5, 10).unwrap();
    let zero = anderson_gap(&norm, &DVector::zeros(10), 100, key(50)).unwrap();
    assert_eq!(zero.gap.mean, 0.0);
    assert_eq!(zero.gap.stderr, 0.0);

    let x = standard_normal(10, key(51));
    let g = anderson_gap(&NormSpec::euclidean(10), &x, 20_000, key(52)).unwrap();
    assert!(g.gap.within(x.norm_squared(), 3.0), "{g:?}");

    for d in [64, 256, 1024] {
        let mut e1 = DVector::zeros(d);
        e1[0] = 1.0;
        for p in [1.25, 1.5, 2.0] {
            let g = anderson_gap(&NormSpec::lp(p, d).unwrap(), &e1, 2000, key(53)).unwrap();
            assert!(g.gap.mean >= -3.0 * g.gap.stderr, "p={p} d={d}: {g:?}");
        }
    }
}

proptest! {
    #[test]
    fn projection_is_orthogonal(w in prop::collection::vec(-10f64..10.0, 5), s in prop::collection::vec(-10f64..10.0, 5)) {
        let (w, s) = (DVector::from_vec(w), DVector::from_vec(s));
        prop_assume!(s.norm() > 1e-3);
        let pr = project_onto_signal(&w, &s).unwrap();
        prop_assert!(pr.orthogonal.dot(&s).abs() <= 1e-12 * (w.norm() * s.norm()).max(1.0));
        prop_assert!((&pr.parallel + &pr.orthogonal - &w).norm() <= 1e-12 * w.norm().max(1.0));
    }
}
