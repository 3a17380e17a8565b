//! Synthetic-data settings, accuracy metrics, and a seeded multi-replicate
//! benchmark harness.
//!
//! Four named settings are shipped. Their eigenvalues follow either a
//! power-law decay or a fixed list with a rapidly vanishing tail; their
//! eigenfunctions are either random orthonormal frames over a spline basis
//! (drawn once from a fixed master seed, so truth is stable across versions)
//! or orthonormalized Gaussian bumps standing in for localized spikes.

use crate::basis::BasisSystem;
use crate::data::{SparseDataset, Subject};
use crate::error::{Error, Result};
use crate::init::{estimate_mean, simpson_weights};
use crate::optim::FitOptions;
use crate::selection::select_model;
use crate::stiefel::StiefelPoint;
use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Exp, StandardNormal, StudentT};
use rayon::prelude::*;
use std::collections::BTreeMap;

/// Seed for the shipped eigenfunction frames. Changing it changes the truth
/// of every spline-based setting.
pub const MASTER_SEED: u64 = 0x4650_4341;

/// Grid size used when sampling eigenfunctions for accuracy metrics.
pub const METRIC_GRID: usize = 201;

fn std_normal(rng: &mut ChaCha12Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Unit-variance measurement-noise families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    /// Student t with 4 degrees of freedom, scaled by 1/sqrt(2).
    ScaledT4,
    /// Exponential(1) shifted by -1.
    CenteredExponential,
}

impl NoiseKind {
    pub fn sample(self, rng: &mut ChaCha12Rng) -> f64 {
        match self {
            NoiseKind::Gaussian => std_normal(rng),
            NoiseKind::ScaledT4 => {
                let t: f64 = StudentT::new(4.0).expect("valid dof").sample(rng);
                t / f64::sqrt(2.0)
            }
            NoiseKind::CenteredExponential => {
                let e: f64 = Exp::new(1.0).expect("valid rate").sample(rng);
                e - 1.0
            }
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            NoiseKind::Gaussian => "gaussian",
            NoiseKind::ScaledT4 => "t4",
            NoiseKind::CenteredExponential => "exp",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag.to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(NoiseKind::Gaussian),
            "t4" | "t4-scaled" => Ok(NoiseKind::ScaledT4),
            "exp" | "exponential" | "centered-exponential" => Ok(NoiseKind::CenteredExponential),
            other => Err(Error::Domain(format!("unknown noise tag '{other}'"))),
        }
    }
}

/// True eigenfunctions of a setting, evaluable anywhere in [0, 1].
#[derive(Debug, Clone)]
pub enum EigenBasis {
    /// psi(t) = frame' phi(t) over an orthonormalized spline basis.
    Spline {
        basis: BasisSystem,
        frame: StiefelPoint,
    },
    /// Gaussian bumps mixed into an orthonormal family: psi(t) = mix g(t)
    /// with g_k(t) = exp(-(t - c_k)^2 / (2 w^2)).
    Bumps {
        centers: Vec<f64>,
        width: f64,
        mix: DMatrix<f64>,
    },
}

impl EigenBasis {
    pub fn num_components(&self) -> usize {
        match self {
            EigenBasis::Spline { frame, .. } => frame.ncols(),
            EigenBasis::Bumps { centers, .. } => centers.len(),
        }
    }

    /// Eigenfunction values at one time, as an r-vector.
    pub fn evaluate(&self, t: f64) -> Result<DVector<f64>> {
        match self {
            EigenBasis::Spline { basis, frame } => {
                Ok(frame.matrix().transpose() * basis.orthonormal_at(t)?)
            }
            EigenBasis::Bumps {
                centers,
                width,
                mix,
            } => {
                let raw = DVector::from_fn(centers.len(), |k, _| {
                    let z = (t - centers[k]) / width;
                    f64::exp(-0.5 * z * z)
                });
                Ok(mix * raw)
            }
        }
    }

    /// Eigenfunctions sampled on a grid, one row per component.
    pub fn evaluate_on(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        match self {
            EigenBasis::Spline { basis, frame } => {
                Ok(frame.matrix().transpose() * basis.evaluate_design(grid)?)
            }
            EigenBasis::Bumps { .. } => {
                let r = self.num_components();
                let mut out = DMatrix::zeros(r, grid.len());
                for (j, &t) in grid.iter().enumerate() {
                    out.set_column(j, &self.evaluate(t)?);
                }
                Ok(out)
            }
        }
    }
}

/// Complete description of a data-generating truth.
#[derive(Debug, Clone)]
pub struct TruthSpec {
    pub name: String,
    pub eigenvalues: Vec<f64>,
    pub shape: EigenBasis,
    pub sigma2: f64,
    pub noise: NoiseKind,
    /// Inclusive bounds for the per-subject measurement count.
    pub m_range: (usize, usize),
}

fn power_law(r: usize) -> Vec<f64> {
    (1..=r).map(|k| (k as f64).powf(-0.6)).collect()
}

/// Frame drawn once from the master seed; `stream` separates settings.
fn seeded_frame(num_basis: usize, r: usize, stream: u64) -> Result<StiefelPoint> {
    let mut rng =
        ChaCha12Rng::seed_from_u64(MASTER_SEED.wrapping_add(stream.wrapping_mul(0x9E37_79B9)));
    StiefelPoint::orthonormalized(DMatrix::from_fn(num_basis, r, |_, _| std_normal(&mut rng)))
}

/// Orthonormalizes Gaussian bumps: with Gram G = LL', psi = inv(L) g.
fn orthonormal_bumps(centers: Vec<f64>, width: f64) -> Result<EigenBasis> {
    let r = centers.len();
    let g = 4001;
    let w = simpson_weights(g);
    let mut gram = DMatrix::zeros(r, r);
    for j in 0..g {
        let t = j as f64 / (g - 1) as f64;
        let vals = DVector::from_fn(r, |k, _| {
            let z = (t - centers[k]) / width;
            f64::exp(-0.5 * z * z)
        });
        gram.ger(w[j], &vals, &vals, 1.0);
    }
    let chol = Cholesky::new(gram)
        .ok_or_else(|| Error::Indefinite("bump Gram matrix".into()))?;
    let mix = chol
        .l()
        .solve_lower_triangular(&DMatrix::identity(r, r))
        .ok_or_else(|| Error::SingularSystem("bump Gram factor".into()))?;
    Ok(EigenBasis::Bumps {
        centers,
        width,
        mix,
    })
}

impl TruthSpec {
    /// Three power-law eigenvalues over a 5-function cubic spline basis.
    pub fn easy(sigma2: f64, noise: NoiseKind) -> Result<Self> {
        Ok(Self::checked(
            "easy",
            power_law(3),
            EigenBasis::Spline {
                basis: BasisSystem::new(5, 4)?,
                frame: seeded_frame(5, 3, 1)?,
            },
            sigma2,
            noise,
        )?)
    }

    /// Five power-law eigenvalues over a 10-function cubic spline basis.
    pub fn practical(sigma2: f64, noise: NoiseKind) -> Result<Self> {
        Ok(Self::checked(
            "practical",
            power_law(5),
            EigenBasis::Spline {
                basis: BasisSystem::new(10, 4)?,
                frame: seeded_frame(10, 5, 2)?,
            },
            sigma2,
            noise,
        )?)
    }

    /// Three power-law eigenvalues with localized bump eigenfunctions
    /// (centers 0.25/0.5/0.75, width 0.05).
    pub fn challenging(sigma2: f64, noise: NoiseKind) -> Result<Self> {
        Ok(Self::checked(
            "challenging",
            power_law(3),
            orthonormal_bumps(vec![0.25, 0.5, 0.75], 0.05)?,
            sigma2,
            noise,
        )?)
    }

    /// Ten fixed eigenvalues whose fourth entry is comparable to a 1/16
    /// noise variance and whose tail vanishes rapidly.
    pub fn hybrid(sigma2: f64, noise: NoiseKind) -> Result<Self> {
        let eigenvalues = vec![
            1.0, 0.66, 0.52, 0.07, 9.47e-3, 1.28e-3, 1.74e-4, 2.35e-5, 3.18e-6, 4.30e-7,
        ];
        Ok(Self::checked(
            "hybrid",
            eigenvalues,
            EigenBasis::Spline {
                basis: BasisSystem::new(10, 4)?,
                frame: seeded_frame(10, 10, 3)?,
            },
            sigma2,
            noise,
        )?)
    }

    pub fn by_name(name: &str, sigma2: f64, noise: NoiseKind) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "easy" => Self::easy(sigma2, noise),
            "practical" => Self::practical(sigma2, noise),
            "challenging" => Self::challenging(sigma2, noise),
            "hybrid" => Self::hybrid(sigma2, noise),
            other => Err(Error::Domain(format!("unknown setting '{other}'"))),
        }
    }

    fn checked(
        name: &str,
        eigenvalues: Vec<f64>,
        shape: EigenBasis,
        sigma2: f64,
        noise: NoiseKind,
    ) -> Result<Self> {
        let spec = TruthSpec {
            name: name.into(),
            eigenvalues,
            shape,
            sigma2,
            noise,
            m_range: (2, 10),
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.eigenvalues.is_empty() {
            return Err(Error::Empty("truth has no eigenvalues".into()));
        }
        if self.eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0))
            || self.eigenvalues.windows(2).any(|w| w[1] > w[0])
        {
            return Err(Error::Domain(
                "eigenvalues must be positive and non-increasing".into(),
            ));
        }
        if self.eigenvalues.len() != self.shape.num_components() {
            return Err(Error::Dimension(format!(
                "{} eigenvalues for {} eigenfunctions",
                self.eigenvalues.len(),
                self.shape.num_components()
            )));
        }
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::Domain(format!(
                "noise variance {} must be positive",
                self.sigma2
            )));
        }
        if self.m_range.0 < 1 || self.m_range.0 > self.m_range.1 {
            return Err(Error::Domain(format!(
                "bad measurement-count range {:?}",
                self.m_range
            )));
        }
        Ok(())
    }

    /// True eigenfunctions sampled on a grid, one row per component.
    pub fn eigenfunctions_on(&self, grid: &[f64]) -> Result<DMatrix<f64>> {
        self.shape.evaluate_on(grid)
    }
}

/// Latent quantities drawn while generating a dataset.
#[derive(Debug, Clone)]
pub struct TruthRecord {
    pub setting: String,
    pub eigenvalues: Vec<f64>,
    pub sigma2: f64,
    pub noise: &'static str,
    /// Per-subject component scores, n rows of r values.
    pub scores: Vec<Vec<f64>>,
}

/// Draws a dataset from the truth: per subject, a uniform measurement count
/// in `m_range`, uniform times, standard-normal scores, and unit-variance
/// noise scaled by sigma. The mean function is identically zero.
///
/// One sequential generator stream per call, in the draw order
/// (count, times, scores, noise) per subject, so output is a pure function
/// of (spec, n, seed).
pub fn generate(spec: &TruthSpec, n: usize, seed: u64) -> Result<(SparseDataset, TruthRecord)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::Empty("cannot generate zero subjects".into()));
    }
    let r = spec.eigenvalues.len();
    let sigma = spec.sigma2.sqrt();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut subjects = Vec::with_capacity(n);
    let mut all_scores = Vec::with_capacity(n);
    for i in 0..n {
        let m = rng.random_range(spec.m_range.0..=spec.m_range.1);
        let times: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
        let scores: Vec<f64> = (0..r).map(|_| std_normal(&mut rng)).collect();
        let psi = spec.shape.evaluate_on(&times)?;
        let values: Vec<f64> = (0..m)
            .map(|j| {
                let signal: f64 = (0..r)
                    .map(|k| spec.eigenvalues[k].sqrt() * psi[(k, j)] * scores[k])
                    .sum();
                signal + sigma * spec.noise.sample(&mut rng)
            })
            .collect();
        subjects.push(Subject::new(format!("s{i}"), times, values)?);
        all_scores.push(scores);
    }
    let dataset = SparseDataset::from_subjects(subjects)?;
    let record = TruthRecord {
        setting: spec.name.clone(),
        eigenvalues: spec.eigenvalues.clone(),
        sigma2: spec.sigma2,
        noise: spec.noise.label(),
        scores: all_scores,
    };
    Ok((dataset, record))
}

/// Integrated squared error per component after sign alignment, on a shared
/// grid with the given quadrature weights. Rows are components; when the two
/// sides hold different component counts, the leading common ones are scored.
pub fn mise_eigenfunctions(
    estimated: &DMatrix<f64>,
    truth: &DMatrix<f64>,
    weights: &DVector<f64>,
) -> Result<DVector<f64>> {
    let g = weights.len();
    if estimated.ncols() != g || truth.ncols() != g {
        return Err(Error::Dimension(format!(
            "grids disagree: {} and {} columns for {} weights",
            estimated.ncols(),
            truth.ncols(),
            g
        )));
    }
    let r = estimated.nrows().min(truth.nrows());
    let mut ise = DVector::zeros(r);
    for k in 0..r {
        let mut ip = 0.0;
        for j in 0..g {
            ip += weights[j] * estimated[(k, j)] * truth[(k, j)];
        }
        let s = if ip >= 0.0 { 1.0 } else { -1.0 };
        let mut acc = 0.0;
        for j in 0..g {
            let d = estimated[(k, j)] - s * truth[(k, j)];
            acc += weights[j] * d * d;
        }
        ise[k] = acc;
    }
    Ok(ise)
}

/// Mean squared error of the estimates divided by the squared truth.
pub fn nmse(estimates: &[f64], truth: f64) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("no estimates to score".into()));
    }
    if truth == 0.0 || !truth.is_finite() {
        return Err(Error::Domain(format!(
            "cannot normalize by truth value {truth}"
        )));
    }
    let mse = estimates
        .iter()
        .map(|e| (e - truth) * (e - truth))
        .sum::<f64>()
        / estimates.len() as f64;
    Ok(mse / (truth * truth))
}

/// Benchmark shape: replicate count, sample size, selection grids, seed.
#[derive(Debug, Clone)]
pub struct BenchmarkConfig {
    pub n: usize,
    pub replicates: usize,
    pub m_grid: Vec<usize>,
    pub r_grid: Vec<usize>,
    pub seed: u64,
    pub fit: FitOptions,
}

/// What happened in one replicate. Metrics are present iff it converged.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub converged: bool,
    pub chosen: Option<(usize, usize)>,
    pub cv_total: Option<f64>,
    pub mise: Option<Vec<f64>>,
    pub eigenvalue_estimates: Option<Vec<f64>>,
    pub sigma2_estimate: Option<f64>,
    pub failure: Option<String>,
}

/// Aggregated accuracy metrics over the converged replicates.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub setting: String,
    pub replicates: usize,
    pub converged: usize,
    /// Per-component MISE mean, over replicates fitting that component.
    pub mise_mean: Vec<f64>,
    /// Matching sample standard deviations (0 when fewer than 2 values).
    pub mise_sd: Vec<f64>,
    /// Per-eigenvalue normalized MSE against the truth.
    pub eigenvalue_nmse: Vec<f64>,
    /// Normalized MSE of the noise variance; absent if nothing converged.
    pub sigma2_nmse: Option<f64>,
    /// How often each (M, r) cell was chosen, in increasing cell order.
    pub selection_counts: Vec<((usize, usize), usize)>,
    pub outcomes: Vec<ReplicateOutcome>,
}

pub fn derive_seed(seed: u64, replicate: usize) -> u64 {
    seed.wrapping_add((replicate as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn run_replicate(spec: &TruthSpec, config: &BenchmarkConfig, k: usize) -> ReplicateOutcome {
    let seed = derive_seed(config.seed, k);
    let mut out = ReplicateOutcome {
        replicate: k,
        seed,
        converged: false,
        chosen: None,
        cv_total: None,
        mise: None,
        eigenvalue_estimates: None,
        sigma2_estimate: None,
        failure: None,
    };
    let step = || -> Result<(Vec<f64>, Vec<f64>, f64, (usize, usize), f64)> {
        let (data, _) = generate(spec, config.n, seed)?;
        let mean = estimate_mean(&data, None)?;
        let centered = data.centered_by(|t| mean.evaluate(t));
        let selection = select_model(&centered, &config.m_grid, &config.r_grid, &config.fit, &[])?;
        let report = selection.chosen_report();
        let (m, r) = selection.chosen;

        let basis = BasisSystem::new(m, 4.min(m))?;
        let grid: Vec<f64> = (0..METRIC_GRID)
            .map(|j| j as f64 / (METRIC_GRID - 1) as f64)
            .collect();
        let estimated = report.params.b.matrix().transpose() * basis.evaluate_design(&grid)?;
        let truth_fns = spec.eigenfunctions_on(&grid)?;
        let weights = simpson_weights(METRIC_GRID);
        let ise = mise_eigenfunctions(&estimated, &truth_fns, &weights)?;

        Ok((
            ise.iter().copied().collect(),
            report.params.eigenvalues().iter().copied().collect(),
            report.params.noise_variance(),
            (m, r),
            selection.chosen_cv().total,
        ))
    };
    match step() {
        Ok((mise, eigenvalues, sigma2, chosen, cv_total)) => {
            out.converged = true;
            out.chosen = Some(chosen);
            out.cv_total = Some(cv_total);
            out.mise = Some(mise);
            out.eigenvalue_estimates = Some(eigenvalues);
            out.sigma2_estimate = Some(sigma2);
        }
        Err(e) => out.failure = Some(e.to_string()),
    }
    out
}

fn mean_and_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Runs seeded replicates of the generate / center / select pipeline and
/// aggregates accuracy over the converged subset. Replicates run
/// concurrently; per-replicate seeds and the aggregation order are fixed,
/// so the report is a pure function of (spec, config).
pub fn run_benchmark(spec: &TruthSpec, config: &BenchmarkConfig) -> Result<MetricReport> {
    spec.validate()?;
    config.fit.validate()?;
    if config.replicates == 0 {
        return Err(Error::Empty("benchmark needs at least one replicate".into()));
    }
    if config.n == 0 {
        return Err(Error::Empty("benchmark needs at least one subject".into()));
    }
    if config.m_grid.is_empty() || config.r_grid.is_empty() {
        return Err(Error::Empty("benchmark selection grids are empty".into()));
    }

    let outcomes: Vec<ReplicateOutcome> = (0..config.replicates)
        .into_par_iter()
        .map(|k| run_replicate(spec, config, k))
        .collect();

    let converged: Vec<&ReplicateOutcome> = outcomes.iter().filter(|o| o.converged).collect();

    let max_mise = converged
        .iter()
        .filter_map(|o| o.mise.as_ref().map(Vec::len))
        .max()
        .unwrap_or(0);
    let mut mise_mean = Vec::with_capacity(max_mise);
    let mut mise_sd = Vec::with_capacity(max_mise);
    for k in 0..max_mise {
        let vals: Vec<f64> = converged
            .iter()
            .filter_map(|o| o.mise.as_ref().and_then(|m| m.get(k)).copied())
            .collect();
        let (mean, sd) = mean_and_sd(&vals);
        mise_mean.push(mean);
        mise_sd.push(sd);
    }

    let mut eigenvalue_nmse = Vec::new();
    for (k, &truth) in spec.eigenvalues.iter().enumerate() {
        let vals: Vec<f64> = converged
            .iter()
            .filter_map(|o| o.eigenvalue_estimates.as_ref().and_then(|l| l.get(k)).copied())
            .collect();
        if vals.is_empty() {
            break;
        }
        eigenvalue_nmse.push(nmse(&vals, truth)?);
    }

    let sigma2_estimates: Vec<f64> = converged.iter().filter_map(|o| o.sigma2_estimate).collect();
    let sigma2_nmse = if sigma2_estimates.is_empty() {
        None
    } else {
        Some(nmse(&sigma2_estimates, spec.sigma2)?)
    };

    let mut counts: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for o in &converged {
        if let Some(cell) = o.chosen {
            *counts.entry(cell).or_insert(0) += 1;
        }
    }

    Ok(MetricReport {
        setting: spec.name.clone(),
        replicates: config.replicates,
        converged: converged.len(),
        mise_mean,
        mise_sd,
        eigenvalue_nmse,
        sigma2_nmse,
        selection_counts: counts.into_iter().collect(),
        outcomes,
    })
}
