use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use mni_core::experiments::{report_dir, run_experiment, ExperimentConfig, ROWS_FILE, SUMMARY_FILE};
use mni_core::{Design, InterpolationProblem, MinNormSolver, NormSpec, SolveStatus, SolverOptions};
use nalgebra::DVector;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "mni", version, about = "Minimum-norm interpolation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write rows.csv and summary.json.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's worker count.
        #[arg(long)]
        workers: Option<usize>,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Solve one ℓp minimum-norm interpolation problem and print JSON.
    Solve {
        /// n×d design, one row per line, comma-separated, no header.
        #[arg(long)]
        design: PathBuf,
        /// n targets, comma- or newline-separated.
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        p: f64,
        /// Feasibility and duality-gap tolerance.
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Re-derive the verdict of a run directory from its rows.csv.
    Report {
        #[arg(long)]
        dir: PathBuf,
    },
}

#[derive(Serialize)]
struct SolveOutput {
    weights: Vec<f64>,
    norm_value: f64,
    l2_norm: f64,
    feasibility_residual: f64,
    duality_gap: f64,
    iterations: usize,
    status: SolveStatus,
}

#[derive(Serialize)]
struct RunOutput<'a> {
    rows: PathBuf,
    summary: PathBuf,
    verdict: mni_core::experiments::Verdict,
    slope: Option<f64>,
    notes: &'a [String],
}

#[derive(Serialize)]
struct ReportOutput<'a> {
    scenario: &'a str,
    rows: usize,
    slope: Option<f64>,
    intercept: Option<f64>,
    r_squared: Option<f64>,
    predicted_slope: Option<f64>,
    verdict: mni_core::experiments::Verdict,
    notes: &'a [String],
    rows_digest: &'a str,
    digest_matches: Option<bool>,
    verdict_matches: Option<bool>,
}

fn read_numeric_csv(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.with_context(|| format!("{}: bad record {}", path.display(), i + 1))?;
        let row = record
            .iter()
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().with_context(|| format!("{}: line {}: {s:?} is not a number", path.display(), i + 1))
            })
            .collect::<Result<Vec<f64>>>()?;
        if !row.is_empty() {
            rows.push(row);
        }
    }
    Ok(rows)
}

fn solve(design: &Path, targets: &Path, p: f64, tol: f64) -> Result<()> {
    let rows = read_numeric_csv(design)?;
    let n = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        bail!("design {} is empty", design.display());
    }
    if let Some(bad) = rows.iter().position(|r| r.len() != d) {
        bail!("design row {} has {} entries, expected {d}", bad + 1, rows[bad].len());
    }
    let data: Vec<f64> = rows.concat();
    let y: Vec<f64> = read_numeric_csv(targets)?.concat();
    let problem =
        InterpolationProblem::new(Design::from_rows(n, d, &data)?, DVector::from_vec(y), NormSpec::lp(p, d)?)?;
    let opts = SolverOptions { tol_feasibility: tol, tol_kkt: tol, ..SolverOptions::default() };
    let sol = MinNormSolver::new(&problem.design, problem.norm, opts)?.solve(&problem.targets)?;
    let out = SolveOutput {
        weights: sol.weights.iter().copied().collect(),
        norm_value: sol.norm_value,
        l2_norm: sol.l2_norm,
        feasibility_residual: sol.feasibility_residual,
        duality_gap: sol.duality_gap,
        iterations: sol.iterations,
        status: sol.status,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

fn run(config: &Path, workers: Option<usize>, output_dir: Option<PathBuf>) -> Result<()> {
    let mut cfg =
        ExperimentConfig::from_path(config).with_context(|| format!("cannot load config {}", config.display()))?;
    if workers.is_some() {
        cfg.workers = workers;
    }
    if let Some(dir) = output_dir {
        cfg.output_dir = dir;
    }
    cfg.validate()?;
    let report = run_experiment(&cfg).with_context(|| format!("{} aborted", cfg.scenario.name()))?;
    let out = RunOutput {
        rows: cfg.output_dir.join(ROWS_FILE),
        summary: cfg.output_dir.join(SUMMARY_FILE),
        verdict: report.verdict,
        slope: report.fit.map(|f| f.slope),
        notes: &report.notes,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

/// Prints the re-derived report; fails when it disagrees with summary.json.
fn report(dir: &Path) -> Result<()> {
    let re = report_dir(dir).with_context(|| format!("cannot report on {}", dir.display()))?;
    let out = ReportOutput {
        scenario: re.report.scenario.name(),
        rows: re.report.rows.len(),
        slope: re.report.fit.map(|f| f.slope),
        intercept: re.report.fit.map(|f| f.intercept),
        r_squared: re.report.fit.map(|f| f.r_squared),
        predicted_slope: re.report.predicted_slope,
        verdict: re.report.verdict,
        notes: &re.report.notes,
        rows_digest: &re.rows_digest,
        digest_matches: re.digest_matches,
        verdict_matches: re.verdict_matches,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    if re.digest_matches == Some(false) {
        bail!("rows.csv digest differs from summary.json");
    }
    if re.verdict_matches == Some(false) {
        bail!("re-derived verdict differs from summary.json");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, workers, output_dir } => run(&config, workers, output_dir),
        Command::Solve { design, targets, p, tol } => solve(&design, &targets, p, tol),
        Command::Report { dir } => report(&dir),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
