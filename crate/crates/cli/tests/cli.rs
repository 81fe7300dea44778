use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn mni(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mni")).args(args).output().expect("failed to launch mni")
}

fn json(out: &Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is not JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn solve_prints_kkt_solution() {
    let dir = tempfile::tempdir().unwrap();
    let design = write(dir.path(), "x.csv", "1,2\n");
    let targets = write(dir.path(), "y.csv", "1\n");
    let v = json(&mni(&["solve", "--design", &design, "--targets", &targets, "--p", "1.5"]));
    let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    assert!((w[0] - 1.0 / 9.0).abs() <= 1e-6 && (w[1] - 4.0 / 9.0).abs() <= 1e-6, "{w:?}");
    assert_eq!(v["status"]["status"], "converged");
    assert!(v["duality_gap"].as_f64().unwrap() <= 1e-8);
    assert!(v["feasibility_residual"].as_f64().unwrap() <= 1e-8);
}

#[test]
fn solve_accepts_column_targets_and_custom_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let design = write(dir.path(), "x.csv", "1,0,1\n0,1,1\n");
    let targets = write(dir.path(), "y.csv", "1\n-1\n");
    let v = json(&mni(&["solve", "--design", &design, "--targets", &targets, "--p", "2", "--tol", "1e-10"]));
    let w: Vec<f64> = v["weights"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
    // Pseudoinverse solution of the 2×3 system.
    for (a, b) in w.iter().zip([1.0, -1.0, 0.0]) {
        assert!((a - b).abs() <= 1e-10, "{w:?}");
    }
}

#[test]
fn solve_rejects_bad_input() {
    let dir = tempfile::tempdir().unwrap();
    let design = write(dir.path(), "x.csv", "1,2\n3\n");
    let targets = write(dir.path(), "y.csv", "1,1\n");
    assert!(!mni(&["solve", "--design", &design, "--targets", &targets, "--p", "1.5"]).status.success());
    let design = write(dir.path(), "x2.csv", "1,2\n2,4\n");
    let out = mni(&["solve", "--design", &design, "--targets", &targets, "--p", "1.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("rank deficient"));
    let design = write(dir.path(), "x3.csv", "1,2\n");
    let single = write(dir.path(), "y1.csv", "1\n");
    assert!(!mni(&["solve", "--design", &design, "--targets", &single, "--p", "2.5"]).status.success());
    let text = write(dir.path(), "x4.csv", "a,b\n");
    assert!(!mni(&["solve", "--design", &text, "--targets", &single, "--p", "1.5"]).status.success());
}

#[test]
fn run_then_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("out");
    let config = format!(
        r#"{{"scenario": "t2_rate", "p": 1.5, "d_grid": [16, 32, 64], "n_grid": [4],
            "mc": {{"outer": 4, "inner": 4}}, "seed": 5, "output_dir": {:?}}}"#,
        out_dir.to_str().unwrap()
    );
    let cfg = write(dir.path(), "cfg.json", &config);
    let run = json(&mni(&["run", "--config", &cfg]));
    assert!(out_dir.join("rows.csv").exists());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], run["verdict"]);

    let out = out_dir.to_str().unwrap();
    let report = json(&mni(&["report", "--dir", out]));
    assert_eq!(report["verdict"], summary["verdict"]);
    assert_eq!(report["slope"], summary["slope"]);
    assert_eq!(report["rows_digest"], summary["rows_digest"]);
    assert_eq!(report["digest_matches"], true);

    let rows = fs::read_to_string(out_dir.join("rows.csv")).unwrap();
    fs::write(out_dir.join("rows.csv"), rows.replacen(",16,", ",17,", 1)).unwrap();
    assert!(!mni(&["report", "--dir", out]).status.success());
}

#[test]
fn worker_override_keeps_rows_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"{"scenario": "linf_profile", "p": 1.5, "d_grid": [16, 64], "n_grid": [4],
        "mc": {"outer": 3, "inner": 3}, "seed": 9}"#;
    let cfg = write(dir.path(), "cfg.json", config);
    let mut bytes = Vec::new();
    for workers in ["1", "3"] {
        let out = dir.path().join(format!("w{workers}"));
        json(&mni(&["run", "--config", &cfg, "--workers", workers, "--output-dir", out.to_str().unwrap()]));
        bytes.push(fs::read(out.join("rows.csv")).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
}

#[test]
fn run_rejects_unknown_fields_and_reports_aborts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "bad.json",
        r#"{"scenario": "t2_rate", "p": 1.5, "d_grid": [16, 32, 64], "n_grid": [4], "bogus": 1}"#,
    );
    let out = mni(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus"));

    let out_dir = dir.path().join("abort");
    let config = format!(
        r#"{{"scenario": "linf_profile", "p": 1.5, "d_grid": [16, 64], "n_grid": [4],
            "mc": {{"outer": 3, "inner": 3}}, "solver": {{"max_iterations": 1}}, "output_dir": {:?}}}"#,
        out_dir.to_str().unwrap()
    );
    let cfg = write(dir.path(), "abort.json", &config);
    let out = mni(&["run", "--config", &cfg]);
    assert!(!out.status.success());
    let summary: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["verdict"], "aborted");
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "json") {
            mni_core::experiments::ExperimentConfig::from_path(&path)
                .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 1);
}
