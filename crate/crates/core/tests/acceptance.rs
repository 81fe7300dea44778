//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Runs as a plain binary so the lines are never captured.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use mni_core::decomposition::{anderson_gap, estimate_hermite, GroundTruth};
use mni_core::experiments::{
    run_experiment, ExperimentConfig, McConfig, RateReport, Row, Scenario, Verdict, ROWS_FILE,
};
use mni_core::norms::{check_uc2, check_usp};
use mni_core::rng::{sample_design, sample_noise, standard_normal, streams};
use mni_core::solvers::{brute_force_oracle, solve_min_norm};
use mni_core::{Design, DesignSpec, Distribution, InterpolationProblem, NoiseKind, NormSpec, SolverOptions, StreamKey};
use nalgebra::DVector;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_design(n: usize, d: usize, seed: u64) -> Design {
    sample_design(DesignSpec::gaussian(n, d), StreamKey::new(seed, streams::DESIGN, 0)).unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let opts = SolverOptions::default();
    let mut worst: f64 = 0.0;
    for k in 0..100u64 {
        let n = 1 + (k % 2) as usize;
        let d = 3 + ((k / 2) % 2) as usize;
        let p = [1.1, 1.5, 2.0][(k % 3) as usize];
        let x = random_design(n, d, 10_000 + k);
        let y = sample_noise(NoiseKind::standard(), n, StreamKey::new(10_000 + k, streams::NOISE, 0)).unwrap();
        let prob = InterpolationProblem::new(x, y, NormSpec::lp(p, d).unwrap()).unwrap();
        let fast = solve_min_norm(&prob, &opts).map_err(|e| e.to_string())?;
        let slow = brute_force_oracle(&prob, 60).map_err(|e| e.to_string())?;
        worst = worst.max((fast.norm_value - slow.norm_value).abs() / fast.norm_value);
    }
    let secs = start.elapsed().as_secs_f64();
    check(worst <= 1e-4 && secs < 30.0, format!("max relative gap {worst:.2e}, {secs:.1} s"))
}

fn l2_closed_form() -> Outcome {
    let opts = SolverOptions::default();
    let mut worst: f64 = 0.0;
    for k in 0..50u64 {
        let n = 1 + (k as usize * 13) % 64;
        let d = n + 1 + (k as usize * 37) % (256 - n);
        let x = random_design(n, d, 20_000 + k);
        let y = standard_normal(n, StreamKey::new(20_000 + k, streams::NOISE, 0));
        let pinv = x.matrix.clone().pseudo_inverse(1e-13).unwrap();
        let expected = &pinv * &y;
        let prob = InterpolationProblem::new(x, y, NormSpec::euclidean(d)).unwrap();
        let sol = solve_min_norm(&prob, &opts).map_err(|e| e.to_string())?;
        worst = worst.max((&sol.weights - expected).norm());
    }
    check(worst <= 1e-8, format!("max l2 distance to the pseudoinverse solution {worst:.2e}"))
}

fn kkt_example() -> Outcome {
    let x = Design::from_rows(1, 2, &[1.0, 2.0]).unwrap();
    let prob = InterpolationProblem::new(x, DVector::from_vec(vec![1.0]), NormSpec::lp(1.5, 2).unwrap()).unwrap();
    let sol = solve_min_norm(&prob, &SolverOptions::default()).map_err(|e| e.to_string())?;
    let err = (sol.weights[0] - 1.0 / 9.0).abs().max((sol.weights[1] - 4.0 / 9.0).abs());
    check(err <= 1e-6, format!("w = ({:.10}, {:.10}), max error {err:.2e}", sol.weights[0], sol.weights[1]))
}

fn curvature_suite() -> Outcome {
    let mut violations = 0;
    let mut parallelogram: f64 = 0.0;
    for (j, p) in [1.1, 1.25, 1.5, 1.75, 2.0].into_iter().enumerate() {
        for k in 0..10_000u64 {
            let d = 1 + (k % 16) as usize;
            let spec = NormSpec::lp(p, d).unwrap();
            let key = StreamKey::new(30_000 + j as u64, streams::PROBE, k);
            let f = standard_normal(d, key.child(0)) * (1.0 + (k % 7) as f64);
            let g = standard_normal(d, key.child(1));
            let uc = check_uc2(&spec, &f, &g, p - 1.0).unwrap();
            let us = check_usp(&spec, &f, &g, p, 1.0).unwrap();
            violations += usize::from(!uc.holds) + usize::from(!us.holds);
            if p == 2.0 {
                parallelogram = parallelogram.max((uc.lhs - uc.rhs).abs() / uc.rhs.max(1.0));
            }
        }
    }
    check(
        violations == 0 && parallelogram <= 1e-12,
        format!("{violations} violations in 5x10^4 pairs, p=2 parallelogram defect {parallelogram:.1e}"),
    )
}

fn rate_config(
    scenario: Scenario,
    d_grid: Vec<usize>,
    n_grid: Vec<usize>,
    mc: McConfig,
    dir: &Path,
) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(scenario, 1.5, d_grid, n_grid);
    cfg.mc = mc;
    cfg.seed = 2024;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

fn describe(report: &RateReport) -> String {
    let slope = report.fit.map_or("none".to_string(), |f| format!("{:.3} (r2 {:.4})", f.slope, f.r_squared));
    let estimates: Vec<String> =
        report.rows.iter().map(|r| format!("{}:{:.4e}±{:.1e}", r.grid_value, r.estimate, r.stderr)).collect();
    format!("slope {slope}, rows [{}]", estimates.join(" "))
}

fn slope_within(report: &RateReport, lo: f64, hi: f64) -> bool {
    report.fit.is_some_and(|f| (lo..=hi).contains(&f.slope))
}

/// |MSE − (E1 + E2 + T2)| against the propagated standard error of the terms.
fn identity_holds(row: &Row) -> (bool, f64, f64) {
    let get = |c: &str| row.get_f64(c).unwrap_or(f64::NAN);
    let residual = (get("mse") - (get("e1") + get("e2") + get("t2"))).abs();
    let se = ["mse_stderr", "e1_stderr", "e2_stderr", "t2_stderr"].iter().map(|c| get(c).powi(2)).sum::<f64>().sqrt();
    (residual <= 3.0 * se, residual, se)
}

fn t2_rate(distribution: Distribution, dir: &Path) -> (Outcome, Option<RateReport>) {
    let mut cfg =
        rate_config(Scenario::T2Rate, vec![512, 1024, 2048, 4096], vec![32], McConfig { outer: 50, inner: 50 }, dir);
    cfg.design.distribution = distribution;
    let start = Instant::now();
    match run_experiment(&cfg) {
        Ok(report) => {
            let secs = start.elapsed().as_secs_f64();
            let ok = slope_within(&report, -1.2, -0.8) && secs <= 900.0;
            (check(ok, format!("{}, {secs:.0} s", describe(&report))), Some(report))
        }
        Err(e) => (Err(e.to_string()), None),
    }
}

fn t1_rate(dir: &Path) -> (Outcome, Option<RateReport>) {
    let cfg = rate_config(Scenario::T1Rate, vec![2048], vec![32, 64, 128, 256], McConfig { outer: 25, inner: 20 }, dir);
    match run_experiment(&cfg) {
        Ok(report) => {
            let ok = slope_within(&report, -1.5 - 0.3, -1.5 + 0.3);
            (check(ok, describe(&report)), Some(report))
        }
        Err(e) => (Err(e.to_string()), None),
    }
}

fn decomposition_identity(reports: &[Option<&RateReport>]) -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for report in reports {
        let Some(report) = report else {
            return Err("a decomposition run is missing".into());
        };
        for row in &report.rows {
            let (holds, residual, se) = identity_holds(row);
            ok &= holds;
            lines.push(format!("{}:{residual:.1e}/{se:.1e}", row.grid_value));
        }
    }
    check(ok, format!("residual/propagated stderr [{}]", lines.join(" ")))
}

fn hermite_linearization() -> Outcome {
    let (n, d) = (4, 16);
    let x = random_design(n, d, 40_000);
    let pinv = x.matrix.clone().pseudo_inverse(1e-12).unwrap();
    let (coef, samples) = estimate_hermite(
        &x,
        &NormSpec::euclidean(d),
        &GroundTruth::zero(d),
        10_000,
        StreamKey::new(40_001, 0, 0),
        &SolverOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..d {
            let z = (coef.alpha[i][j] - pinv[(j, i)]).abs() / coef.stderr_per_coordinate[i][j];
            worst = worst.max(z);
        }
    }
    let residual = coef.interpolation_residuals(&x, &samples).into_iter().map(|(r, se)| r / se).fold(0.0, f64::max);
    check(
        worst <= 3.0 && residual <= 5.0,
        format!("max |alpha - pinv|/stderr {worst:.2}, max residual/stderr {residual:.2}"),
    )
}

fn efron_stein(report: Option<&RateReport>) -> Outcome {
    let report = report.ok_or("criterion-5 run is missing")?;
    let mut ok = true;
    let mut parts = Vec::new();
    for row in &report.rows {
        let t2 = row.estimate;
        let threshold = row.get_f64("es_threshold").unwrap_or(f64::NAN);
        ok &= t2 >= threshold;
        parts.push(format!("{}:{t2:.3e}>={threshold:.3e}", row.grid_value));
    }
    check(ok, format!("T2 vs 1e-2 n Psi^2 [{}]", parts.join(" ")))
}

fn anderson(dir: &Path) -> Outcome {
    let mut negatives = Vec::new();
    for (j, p) in [1.25, 1.5, 2.0].into_iter().enumerate() {
        for d in [64, 256, 1024] {
            let e1 = {
                let mut v = DVector::zeros(d);
                v[0] = 1.0;
                v
            };
            let dense =
                standard_normal(d, StreamKey::new(50_000 + j as u64, streams::PROBE, d as u64)) / (d as f64).sqrt();
            for (name, x) in [("e1", e1), ("dense", dense)] {
                let gap = anderson_gap(&NormSpec::lp(p, d).unwrap(), &x, 2000, StreamKey::new(50_100, 0, d as u64))
                    .map_err(|e| e.to_string())?;
                if gap.gap.mean < -3.0 * gap.gap.stderr {
                    negatives.push(format!("p={p} d={d} x={name}"));
                }
            }
        }
    }
    let cfg = rate_config(Scenario::AndersonScan, vec![64, 256, 1024], vec![], McConfig { outer: 40, inner: 50 }, dir);
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let ratios: Vec<f64> = report.rows.iter().map(|r| r.estimate).collect();
    let band = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    check(
        negatives.is_empty() && report.verdict == Verdict::Pass,
        format!("negative gaps {negatives:?}, p=1.5 e1 ratios {ratios:.3?}, max/min {band:.3}"),
    )
}

fn verdict_run(cfg: &ExperimentConfig) -> Outcome {
    let report = run_experiment(cfg).map_err(|e| e.to_string())?;
    let mut detail = describe(&report);
    if !report.notes.is_empty() {
        detail = format!("{detail}; {}", report.notes.join("; "));
    }
    check(report.verdict == Verdict::Pass, detail)
}

fn linf_profile(dir: &Path) -> Outcome {
    let mut cfg =
        rate_config(Scenario::LinfProfile, vec![512, 2048, 8192], vec![32], McConfig { outer: 20, inner: 10 }, dir);
    cfg.constants.tolerance = Some(2.0);
    verdict_run(&cfg)
}

fn variance_decay(dir: &Path) -> Outcome {
    let cfg = rate_config(
        Scenario::VarianceDecay,
        vec![512, 1024, 2048, 4096],
        vec![32],
        McConfig { outer: 20, inner: 20 },
        dir,
    );
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    check(slope_within(&report, -1.3, -0.7), describe(&report))
}

fn dyadic_envelope(dir: &Path) -> Outcome {
    let mut cfg = rate_config(Scenario::DyadicDiagnostic, vec![4096], vec![32], McConfig { outer: 20, inner: 10 }, dir);
    cfg.constants.tolerance = Some(10.0);
    let report = run_experiment(&cfg).map_err(|e| e.to_string())?;
    let worst = report.rows.iter().map(|r| r.estimate / r.predicted.unwrap_or(f64::NAN)).fold(0.0, f64::max);
    check(
        report.verdict == Verdict::Pass,
        format!("{} blocks, max ratio to predicted bound {worst:.3} (envelope 10)", report.rows.len()),
    )
}

fn determinism(dir: &Path) -> Outcome {
    let mut digests = Vec::new();
    for (scenario, d, n) in [
        (Scenario::T2Rate, vec![64, 128, 256], vec![8]),
        (Scenario::VarianceDecay, vec![64, 128, 256], vec![8]),
        (Scenario::DyadicDiagnostic, vec![512], vec![8]),
    ] {
        let mut bytes = Vec::new();
        for workers in [1, 8] {
            let out = dir.join(format!("{}-{workers}", scenario.name()));
            let mut cfg = rate_config(scenario, d.clone(), n.clone(), McConfig { outer: 6, inner: 6 }, &out);
            cfg.workers = Some(workers);
            run_experiment(&cfg).map_err(|e| e.to_string())?;
            bytes.push(std::fs::read(out.join(ROWS_FILE)).map_err(|e| e.to_string())?);
        }
        if bytes[0] != bytes[1] {
            return Err(format!("{} rows differ between 1 and 8 workers", scenario.name()));
        }
        digests.push(scenario.name());
    }
    Ok(format!("byte-identical rows.csv under 1 and 8 workers for {}", digests.join(", ")))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    })
}

fn main() {
    let root = tempfile::tempdir().expect("tempdir");
    let dir = |name: &str| root.path().join(name);
    let mut results: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut record = |id: u32, name: &'static str, outcome: Outcome| {
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        println!("criterion {id:>2} {tag} {name}: {detail}");
        results.push((id, name, outcome));
    };

    record(1, "solver-oracle equivalence", guarded(oracle_equivalence));
    record(2, "l2 closed form", guarded(l2_closed_form));
    record(3, "KKT example", guarded(kkt_example));
    record(4, "curvature suite", guarded(curvature_suite));

    let (c5, r5) = catch_unwind(AssertUnwindSafe(|| t2_rate(Distribution::Gaussian, &dir("c5"))))
        .unwrap_or_else(|_| (Err("panicked".into()), None));
    record(5, "T2 rate (gaussian)", c5);
    let (c6, r6) =
        catch_unwind(AssertUnwindSafe(|| t1_rate(&dir("c6")))).unwrap_or_else(|_| (Err("panicked".into()), None));
    record(6, "T1 rate", c6);
    let (c7, _) = catch_unwind(AssertUnwindSafe(|| t2_rate(Distribution::Rademacher, &dir("c7"))))
        .unwrap_or_else(|_| (Err("panicked".into()), None));
    record(7, "T2 rate (rademacher)", c7);
    record(8, "linf profile", guarded(|| linf_profile(&dir("c8"))));
    record(9, "normalized variance decay", guarded(|| variance_decay(&dir("c9"))));
    record(10, "decomposition identity", guarded(|| decomposition_identity(&[r5.as_ref(), r6.as_ref()])));
    record(11, "Hermite linearization", guarded(hermite_linearization));
    record(12, "reverse Efron-Stein", guarded(|| efron_stein(r5.as_ref())));
    record(13, "Anderson gap", guarded(|| anderson(&dir("c13"))));
    record(14, "dyadic envelope", guarded(|| dyadic_envelope(&dir("c14"))));
    record(15, "determinism", guarded(|| determinism(&dir("c15"))));

    let failed: Vec<String> = results.iter().filter(|r| r.2.is_err()).map(|r| r.0.to_string()).collect();
    println!("acceptance: {} of {} criteria pass", results.len() - failed.len(), results.len());
    if !failed.is_empty() {
        println!("acceptance: failing criteria {}", failed.join(", "));
        std::process::exit(1);
    }
}
