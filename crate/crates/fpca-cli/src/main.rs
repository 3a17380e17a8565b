//! Command-line front end: dataset simulation, single fits, model selection,
//! and replicated benchmarks, with CSV datasets in and JSON reports out.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or input error, 3 when a fit
//! or selection reports no convergence.

use clap::{Parser, Subcommand};
use fpca::basis::BasisSystem;
use fpca::data::{SparseDataset, load_csv, save_csv};
use fpca::error::Error;
use fpca::init::estimate_mean;
use fpca::likelihood::build_caches;
use fpca::optim::{FitOptions, FitReport, fit};
use fpca::selection::{SelectionResult, select_model};
use fpca::sim::{BenchmarkConfig, METRIC_GRID, NoiseKind, TruthSpec, generate, run_benchmark};
use serde_json::{Value, json};
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "fpca", version, about = "Functional PCA for sparse longitudinal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic dataset from a named truth setting.
    Simulate {
        /// One of: easy, practical, challenging, hybrid.
        #[arg(long)]
        setting: String,
        /// Number of subjects.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Measurement noise variance.
        #[arg(long, default_value_t = 0.0625)]
        sigma2: f64,
        /// Noise family: gaussian, t4, or exp.
        #[arg(long, default_value = "gaussian")]
        noise: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Output CSV path (header subject_id,t,y).
        #[arg(long)]
        out: PathBuf,
        /// Optional JSON path for the latent truth record.
        #[arg(long)]
        truth_out: Option<PathBuf>,
    },
    /// Fit one model to a CSV dataset.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Number of basis functions.
        #[arg(long = "M")]
        num_basis: usize,
        /// Number of components.
        #[arg(long = "r")]
        num_components: usize,
        /// Gradient sup-norm tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        /// Output JSON path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit and score a grid of models, choosing the CV minimizer.
    Select {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated basis sizes.
        #[arg(long = "M-grid", value_delimiter = ',')]
        m_grid: Vec<usize>,
        /// Comma-separated component counts.
        #[arg(long = "r-grid", value_delimiter = ',')]
        r_grid: Vec<usize>,
        /// Explained-variation thresholds for pruning the chosen rank.
        #[arg(long = "fev-kappa", value_delimiter = ',', default_values_t = [0.95, 0.99])]
        fev_kappa: Vec<f64>,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 100)]
        max_iter: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeded replicates of the simulate/select pipeline and aggregate
    /// accuracy metrics.
    Bench {
        #[arg(long)]
        setting: String,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long, default_value_t = 20)]
        replicates: usize,
        #[arg(long = "M-grid", value_delimiter = ',')]
        m_grid: Vec<usize>,
        #[arg(long = "r-grid", value_delimiter = ',')]
        r_grid: Vec<usize>,
        #[arg(long, default_value_t = 0.0625)]
        sigma2: f64,
        #[arg(long, default_value = "gaussian")]
        noise: String,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(message) = configure_threads() {
        eprintln!("error: {message}");
        return 1;
    }
    let start = Instant::now();
    let outcome = match cli.command {
        Command::Simulate {
            setting,
            n,
            sigma2,
            noise,
            seed,
            out,
            truth_out,
        } => cmd_simulate(&setting, n, sigma2, &noise, seed, &out, truth_out.as_deref()),
        Command::Fit {
            data,
            num_basis,
            num_components,
            tol,
            max_iter,
            out,
        } => cmd_fit(&data, num_basis, num_components, tol, max_iter, &out),
        Command::Select {
            data,
            m_grid,
            r_grid,
            fev_kappa,
            tol,
            max_iter,
            out,
        } => cmd_select(&data, &m_grid, &r_grid, &fev_kappa, tol, max_iter, &out),
        Command::Bench {
            setting,
            n,
            replicates,
            m_grid,
            r_grid,
            sigma2,
            noise,
            seed,
            out,
        } => cmd_bench(
            &setting, n, replicates, &m_grid, &r_grid, sigma2, &noise, seed, &out,
        ),
    };
    eprintln!("wall clock: {:.3} s", start.elapsed().as_secs_f64());
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NoModel => 3,
                _ => 2,
            }
        }
    }
}

/// FPCA_THREADS caps the worker pool; unset means machine parallelism.
fn configure_threads() -> Result<(), String> {
    match std::env::var("FPCA_THREADS") {
        Err(_) => Ok(()),
        Ok(raw) => {
            let threads: usize = raw
                .parse()
                .map_err(|_| format!("FPCA_THREADS must be a positive integer, got '{raw}'"))?;
            if threads == 0 {
                return Err("FPCA_THREADS must be a positive integer, got '0'".into());
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build_global()
                .map_err(|e| format!("could not configure thread pool: {e}"))
        }
    }
}

fn write_json(path: &Path, value: &Value) -> Result<(), Error> {
    let mut text = serde_json::to_string_pretty(value).expect("report is valid JSON");
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn metric_grid() -> Vec<f64> {
    (0..METRIC_GRID)
        .map(|j| j as f64 / (METRIC_GRID - 1) as f64)
        .collect()
}

fn cmd_simulate(
    setting: &str,
    n: usize,
    sigma2: f64,
    noise: &str,
    seed: u64,
    out: &Path,
    truth_out: Option<&Path>,
) -> Result<i32, Error> {
    let spec = TruthSpec::by_name(setting, sigma2, NoiseKind::parse(noise)?)?;
    let (data, record) = generate(&spec, n, seed)?;
    save_csv(&data, out)?;
    eprintln!(
        "wrote {} subjects ({} observations) to {}",
        data.num_subjects(),
        data.total_observations(),
        out.display()
    );
    if let Some(path) = truth_out {
        let grid = metric_grid();
        let truth_fns = spec.eigenfunctions_on(&grid)?;
        let value = json!({
            "schema": "fpca/truth/1",
            "setting": record.setting,
            "n": n,
            "seed": seed,
            "eigenvalues": record.eigenvalues,
            "sigma2": record.sigma2,
            "noise": record.noise,
            "scores": record.scores,
            "eigenfunction_grid": grid,
            "eigenfunctions": rows(&truth_fns),
        });
        write_json(path, &value)?;
        eprintln!("wrote truth record to {}", path.display());
    }
    Ok(0)
}

fn rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| m.row(i).iter().copied().collect())
        .collect()
}

fn report_json(report: &FitReport) -> Value {
    json!({
        "converged": report.converged,
        "iterations": report.iterations,
        "final_grad_supnorm": report.final_grad_supnorm,
        "neg_loglik": report.neg_loglik,
        "failure_reason": report.failure_reason,
        "eigenvalues": report.params.eigenvalues().iter().copied().collect::<Vec<_>>(),
        "noise_variance": report.params.noise_variance(),
        "coefficients": rows(report.params.b.matrix()),
        "trace": report.trace.iter().map(|t| json!({
            "objective": t.objective,
            "grad_supnorm": t.grad_supnorm,
            "alpha_tz": t.alpha_tz,
            "alpha_b": t.alpha_b,
        })).collect::<Vec<_>>(),
    })
}

/// Loads a dataset, estimates and removes its mean, and reports both.
fn load_centered(path: &Path) -> Result<(SparseDataset, Vec<f64>), Error> {
    let data = load_csv(path)?;
    let mean = estimate_mean(&data, None)?;
    let grid = metric_grid();
    let mean_values: Vec<f64> = grid.iter().map(|&t| mean.evaluate(t)).collect();
    let centered = data.centered_by(|t| mean.evaluate(t));
    Ok((centered, mean_values))
}

fn cmd_fit(
    data_path: &Path,
    num_basis: usize,
    num_components: usize,
    tol: f64,
    max_iter: usize,
    out: &Path,
) -> Result<i32, Error> {
    let (centered, mean_values) = load_centered(data_path)?;
    let basis = BasisSystem::new(num_basis, 4.min(num_basis))?;
    let caches = build_caches(&basis, &centered)?;
    let init = fpca::init::initial_params(&centered, &basis, num_components)?;
    let opts = FitOptions {
        tol,
        max_iter,
        ..FitOptions::default()
    };
    let report = fit(&caches, &init, &opts)?;

    let grid = metric_grid();
    let estimated = report.params.b.matrix().transpose() * basis.evaluate_design(&grid)?;
    let value = json!({
        "schema": "fpca/fit/1",
        "data": data_summary(&centered, data_path),
        "options": {
            "num_basis": num_basis,
            "num_components": num_components,
            "tol": tol,
            "max_iter": max_iter,
        },
        "grid": grid,
        "mean": mean_values,
        "report": report_json(&report),
        "eigenfunctions": rows(&estimated),
    });
    write_json(out, &value)?;
    if report.converged {
        eprintln!("converged in {} iterations", report.iterations);
        Ok(0)
    } else {
        eprintln!(
            "did not converge: {}",
            report.failure_reason.as_deref().unwrap_or("unknown")
        );
        Ok(3)
    }
}

fn data_summary(data: &SparseDataset, path: &Path) -> Value {
    json!({
        "path": path.display().to_string(),
        "subjects": data.num_subjects(),
        "observations": data.total_observations(),
        "time_range": [data.time_range().0, data.time_range().1],
    })
}

fn selection_json(result: &SelectionResult) -> Value {
    json!({
        "grid": result.grid.iter().map(|cell| json!({
            "num_basis": cell.num_basis,
            "num_components": cell.num_components,
            "converged": cell.report.as_ref().map(|r| r.converged),
            "cv": cell.cv.map(|cv| json!({
                "in_sample": cv.in_sample,
                "first_order_tz": cv.first_order_tz,
                "first_order_b": cv.first_order_b,
                "second_order_tz": cv.second_order_tz,
                "second_order_b": cv.second_order_b,
                "total": cv.total,
            })),
            "eigenvalues": cell.report.as_ref().map(|r| {
                r.params.eigenvalues().iter().copied().collect::<Vec<_>>()
            }),
            "noise_variance": cell.report.as_ref().map(|r| r.params.noise_variance()),
            "failure": cell.failure,
        })).collect::<Vec<_>>(),
        "chosen": {
            "num_basis": result.chosen.0,
            "num_components": result.chosen.1,
        },
        "fev": result.fev_pruned.iter().map(|(kappa, r)| json!({
            "kappa": kappa,
            "components": r,
        })).collect::<Vec<_>>(),
    })
}

fn cmd_select(
    data_path: &Path,
    m_grid: &[usize],
    r_grid: &[usize],
    fev_kappa: &[f64],
    tol: f64,
    max_iter: usize,
    out: &Path,
) -> Result<i32, Error> {
    let (centered, mean_values) = load_centered(data_path)?;
    let opts = FitOptions {
        tol,
        max_iter,
        ..FitOptions::default()
    };
    let result = select_model(&centered, m_grid, r_grid, &opts, fev_kappa)?;

    let (m, r) = result.chosen;
    let basis = BasisSystem::new(m, 4.min(m))?;
    let grid = metric_grid();
    let estimated =
        result.chosen_report().params.b.matrix().transpose() * basis.evaluate_design(&grid)?;
    let mut value = selection_json(&result);
    let object = value.as_object_mut().expect("selection report is an object");
    object.insert("schema".into(), json!("fpca/select/1"));
    object.insert("data".into(), data_summary(&centered, data_path));
    object.insert("grid_points".into(), json!(grid));
    object.insert("mean".into(), json!(mean_values));
    object.insert("eigenfunctions".into(), json!(rows(&estimated)));
    write_json(out, &value)?;
    eprintln!("chose M = {m}, r = {r}");
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn cmd_bench(
    setting: &str,
    n: usize,
    replicates: usize,
    m_grid: &[usize],
    r_grid: &[usize],
    sigma2: f64,
    noise: &str,
    seed: u64,
    out: &Path,
) -> Result<i32, Error> {
    let spec = TruthSpec::by_name(setting, sigma2, NoiseKind::parse(noise)?)?;
    let config = BenchmarkConfig {
        n,
        replicates,
        m_grid: m_grid.to_vec(),
        r_grid: r_grid.to_vec(),
        seed,
        fit: FitOptions::default(),
    };
    let report = run_benchmark(&spec, &config)?;
    let value = json!({
        "schema": "fpca/bench/1",
        "setting": report.setting,
        "n": n,
        "replicates": report.replicates,
        "seed": seed,
        "sigma2": sigma2,
        "noise": spec.noise.label(),
        "m_grid": m_grid,
        "r_grid": r_grid,
        "converged": report.converged,
        "mise_mean": report.mise_mean,
        "mise_sd": report.mise_sd,
        "eigenvalue_nmse": report.eigenvalue_nmse,
        "sigma2_nmse": report.sigma2_nmse,
        "selection_counts": report.selection_counts.iter().map(|((m, r), c)| json!({
            "num_basis": m,
            "num_components": r,
            "count": c,
        })).collect::<Vec<_>>(),
        "outcomes": report.outcomes.iter().map(|o| json!({
            "replicate": o.replicate,
            "seed": o.seed,
            "converged": o.converged,
            "chosen": o.chosen.map(|(m, r)| json!([m, r])),
            "cv_total": o.cv_total,
            "mise": o.mise,
            "eigenvalues": o.eigenvalue_estimates,
            "sigma2": o.sigma2_estimate,
            "failure": o.failure,
        })).collect::<Vec<_>>(),
    });
    write_json(out, &value)?;
    eprintln!("{} of {} replicates converged", report.converged, replicates);
    Ok(0)
}
