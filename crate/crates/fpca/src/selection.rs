//! Model choice: an approximate leave-one-curve-out cross-validation score,
//! the (M, r) grid search over basis size and component count, and pruning
//! of the fitted rank by fraction of explained variation.
//!
//! The CV score expands the leave-one-out objective to second order around
//! the full-data optimum, so no refits are needed: each subject contributes
//! quadratic forms of its own gradient through the inverse of the full-data
//! Hessian, block-diagonal across the log-scale and frame parameters.

use crate::basis::BasisSystem;
use crate::data::SparseDataset;
use crate::error::{Error, Result};
use crate::likelihood::{Evaluation, ModelParams, SubjectCache, build_caches};
use crate::optim::{FitOptions, FitReport, fit};
use crate::stiefel::{NewtonSystem, TangentVector, canonical_inner, project_to_tangent};
use nalgebra::Cholesky;
use rayon::prelude::*;

/// Additive pieces of the approximate CV score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CvBreakdown {
    /// Objective at the full-data optimum.
    pub in_sample: f64,
    /// Gradient quadratic forms through the inverse (tau, zeta) Hessian.
    pub first_order_tz: f64,
    /// Gradient quadratic forms through the inverse frame Hessian, in the
    /// canonical metric.
    pub first_order_b: f64,
    /// 3/2-weighted second-order correction, (tau, zeta) block.
    pub second_order_tz: f64,
    /// 3/2-weighted second-order correction, frame block.
    pub second_order_b: f64,
    pub total: f64,
}

/// Second derivative of subject i's objective along the geodesic with
/// initial velocity `delta`: the Euclidean Hessian action plus the gradient
/// paired with the geodesic acceleration.
fn geodesic_second_derivative(
    eval: &Evaluation,
    params: &ModelParams,
    caches: &[SubjectCache],
    i: usize,
    delta: &TangentVector,
) -> f64 {
    let b = params.b.matrix();
    let d = delta.values();
    let h = eval.subject_hess_b_raw(params, caches, i, d);
    let f = &eval.per_subject[i].grad_b;
    let ftd = f.transpose() * d;
    let btd = b.transpose() * d;
    let pid = d - b * &btd;
    let dtpid = d.transpose() * pid;
    let ftb = f.transpose() * b;
    h.dot(d) + (ftd * btd).trace() - (ftb * dtpid).trace()
}

/// Approximate leave-one-curve-out CV score at a converged fit.
///
/// Costs one evaluation pass over the data plus small per-subject linear
/// algebra; the factored full-data Hessian is shared across subjects.
pub fn approx_cv(report: &FitReport, caches: &[SubjectCache]) -> Result<CvBreakdown> {
    if !report.converged {
        return Err(Error::Precondition(
            "the CV expansion requires a converged fit".into(),
        ));
    }
    let params = &report.params;
    let r = params.num_components();
    if caches.len() < r + 2 {
        return Err(Error::Precondition(format!(
            "CV with {r} components needs at least {} subjects, found {}",
            r + 2,
            caches.len()
        )));
    }

    let eval = Evaluation::new(params, caches)?;
    let chol = Cholesky::new(eval.hess_tz.clone()).ok_or_else(|| {
        Error::Indefinite("log-scale Hessian at the reported optimum".into())
    })?;
    let system = NewtonSystem::build(&params.b, &eval.grad_b, |d| {
        eval.hess_b_apply_raw(params, caches, d)
    })?;

    let mut first_order_tz = 0.0;
    let mut second_order_tz = 0.0;
    let mut first_order_b = 0.0;
    let mut second_order_b = 0.0;
    for (i, terms) in eval.per_subject.iter().enumerate() {
        let x = chol.solve(&terms.grad_tz);
        first_order_tz += terms.grad_tz.dot(&x);
        second_order_tz += 1.5 * (&terms.hess_tz * &x).dot(&x);

        let g = project_to_tangent(&params.b, &terms.grad_b)?;
        let y = system.solve(&g)?;
        first_order_b += canonical_inner(&g, &y)?;
        second_order_b += 1.5 * geodesic_second_derivative(&eval, params, caches, i, &y);
    }

    let in_sample = eval.objective;
    let total = in_sample + first_order_tz + first_order_b + second_order_tz + second_order_b;
    Ok(CvBreakdown {
        in_sample,
        first_order_tz,
        first_order_b,
        second_order_tz,
        second_order_b,
        total,
    })
}

/// Outcome for one (M, r) grid cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub num_basis: usize,
    pub num_components: usize,
    /// Present whenever a fit was attempted.
    pub report: Option<FitReport>,
    /// Present iff the cell converged and scored.
    pub cv: Option<CvBreakdown>,
    /// Why the cell is not scored, when it is not.
    pub failure: Option<String>,
}

/// Grid search outcome.
#[derive(Debug, Clone)]
pub struct SelectionResult {
    /// All cells in increasing (M, r) order.
    pub grid: Vec<CellOutcome>,
    /// Cell with the smallest CV total; ties go to smaller M, then r.
    pub chosen: (usize, usize),
    /// Pruned component counts of the chosen fit per requested threshold.
    pub fev_pruned: Vec<(f64, usize)>,
}

impl SelectionResult {
    pub fn chosen_report(&self) -> &FitReport {
        self.grid
            .iter()
            .find(|c| (c.num_basis, c.num_components) == self.chosen)
            .and_then(|c| c.report.as_ref())
            .expect("chosen cell always holds a converged report")
    }

    pub fn chosen_cv(&self) -> &CvBreakdown {
        self.grid
            .iter()
            .find(|c| (c.num_basis, c.num_components) == self.chosen)
            .and_then(|c| c.cv.as_ref())
            .expect("chosen cell always holds a score")
    }
}

fn evaluate_cell(
    data: &SparseDataset,
    num_basis: usize,
    num_components: usize,
    opts: &FitOptions,
) -> CellOutcome {
    let mut cell = CellOutcome {
        num_basis,
        num_components,
        report: None,
        cv: None,
        failure: None,
    };
    if num_components > num_basis {
        cell.failure = Some(format!(
            "skipped: {num_components} components exceed {num_basis} basis functions"
        ));
        return cell;
    }
    let basis = match BasisSystem::new(num_basis, 4.min(num_basis)) {
        Ok(b) => b,
        Err(e) => {
            cell.failure = Some(format!("basis construction failed: {e}"));
            return cell;
        }
    };
    let caches = match build_caches(&basis, data) {
        Ok(c) => c,
        Err(e) => {
            cell.failure = Some(format!("design construction failed: {e}"));
            return cell;
        }
    };
    let init = match crate::init::initial_params(data, &basis, num_components) {
        Ok(p) => p,
        Err(e) => {
            cell.failure = Some(format!("initialization failed: {e}"));
            return cell;
        }
    };
    let report = match fit(&caches, &init, opts) {
        Ok(r) => r,
        Err(e) => {
            cell.failure = Some(format!("fit rejected inputs: {e}"));
            return cell;
        }
    };
    if !report.converged {
        cell.failure = Some(
            report
                .failure_reason
                .clone()
                .unwrap_or_else(|| "did not converge".into()),
        );
        cell.report = Some(report);
        return cell;
    }
    match approx_cv(&report, &caches) {
        Ok(cv) if cv.total.is_finite() => {
            cell.report = Some(report);
            cell.cv = Some(cv);
        }
        Ok(cv) => {
            cell.report = Some(report);
            cell.failure = Some(format!("CV total is not finite ({})", cv.total));
        }
        Err(e) => {
            cell.report = Some(report);
            cell.failure = Some(format!("CV scoring failed: {e}"));
        }
    }
    cell
}

/// First scored cell with the strictly smallest CV total, scanning in
/// increasing (M, r) order.
fn best_cell(grid: &[CellOutcome]) -> Option<(usize, usize)> {
    let mut best: Option<((usize, usize), f64)> = None;
    for cell in grid {
        let Some(cv) = &cell.cv else { continue };
        let key = (cell.num_basis, cell.num_components);
        match &best {
            Some((_, total)) if cv.total >= *total => {}
            _ => best = Some((key, cv.total)),
        }
    }
    best.map(|(key, _)| key)
}

/// Fits and scores every (M, r) cell on mean-centered data and picks the
/// CV minimizer. Grids are deduplicated and sorted, so the outcome does not
/// depend on their enumeration order.
pub fn select_model(
    data: &SparseDataset,
    m_grid: &[usize],
    r_grid: &[usize],
    opts: &FitOptions,
    kappas: &[f64],
) -> Result<SelectionResult> {
    if m_grid.is_empty() || r_grid.is_empty() {
        return Err(Error::Empty("model selection grids are empty".into()));
    }
    let mut ms = m_grid.to_vec();
    ms.sort_unstable();
    ms.dedup();
    let mut rs = r_grid.to_vec();
    rs.sort_unstable();
    rs.dedup();

    let cells: Vec<(usize, usize)> = ms
        .iter()
        .flat_map(|&m| rs.iter().map(move |&r| (m, r)))
        .collect();
    let grid: Vec<CellOutcome> = cells
        .par_iter()
        .map(|&(m, r)| evaluate_cell(data, m, r, opts))
        .collect();

    let chosen = best_cell(&grid).ok_or(Error::NoModel)?;
    let eigenvalues: Vec<f64> = grid
        .iter()
        .find(|c| (c.num_basis, c.num_components) == chosen)
        .and_then(|c| c.report.as_ref())
        .expect("chosen cell holds a report")
        .params
        .eigenvalues()
        .iter()
        .copied()
        .collect();
    let fev_pruned = kappas
        .iter()
        .map(|&k| fev_prune(&eigenvalues, k).map(|r| (k, r)))
        .collect::<Result<Vec<_>>>()?;

    Ok(SelectionResult {
        grid,
        chosen,
        fev_pruned,
    })
}

/// Smallest count whose leading eigenvalues explain at least `kappa` of the
/// summed variation.
pub fn fev_prune(eigenvalues: &[f64], kappa: f64) -> Result<usize> {
    if eigenvalues.is_empty() {
        return Err(Error::Empty("no eigenvalues to prune".into()));
    }
    if !(0.0..=1.0).contains(&kappa) {
        return Err(Error::Domain(format!("threshold {kappa} outside [0, 1]")));
    }
    if eigenvalues.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
        return Err(Error::Domain("eigenvalues must be positive".into()));
    }
    if eigenvalues.windows(2).any(|w| w[1] > w[0]) {
        return Err(Error::Domain("eigenvalues must be non-increasing".into()));
    }
    let total: f64 = eigenvalues.iter().sum();
    let mut cumulative = 0.0;
    for (idx, l) in eigenvalues.iter().enumerate() {
        cumulative += l;
        if cumulative / total >= kappa {
            return Ok(idx + 1);
        }
    }
    Ok(eigenvalues.len())
}
