//! Alternating Newton-Raphson fitter.
//!
//! Each outer iteration takes a damped Euclidean Newton step in the
//! log-scale parameters (tau, zeta), then a Newton step in the frame B along
//! a Stiefel geodesic, both guarded by backtracking line searches on the
//! objective. Convergence is declared when the sup-norm over both gradient
//! blocks falls below the tolerance. Optimization failures (indefinite
//! systems, exhausted line searches, the iteration cap) are reported in the
//! returned [`FitReport`], not raised; only structurally invalid inputs
//! produce an `Err`.

use crate::error::{Error, Result};
use crate::likelihood::{Evaluation, ModelParams, SubjectCache, neg_loglik};
use crate::stiefel::{StiefelPoint, geodesic_step, project_to_tangent, solve_newton_system};
use nalgebra::{Cholesky, DMatrix, DVector};

/// Largest diagonal shift tried before giving up on the (tau, zeta) Hessian.
const LEVENBERG_CAP: f64 = 1e8;

/// Knobs for [`fit`].
#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Convergence threshold on the combined gradient sup-norm.
    pub tol: f64,
    /// Outer iteration cap.
    pub max_iter: usize,
    /// Line searches start at this step fraction during the damped phase.
    pub initial_alpha: f64,
    /// Number of leading iterations that use `initial_alpha`; later
    /// iterations start at a full step.
    pub damped_iters: usize,
    /// Step multiplier applied when a candidate fails to decrease the
    /// objective.
    pub backtrack_factor: f64,
    /// Backtracks allowed per line search.
    pub max_backtracks: usize,
    /// Smallest diagonal shift tried when the (tau, zeta) Hessian is not
    /// positive definite; the shift grows by powers of ten.
    pub levenberg_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-4,
            max_iter: 100,
            initial_alpha: 0.5,
            damped_iters: 3,
            backtrack_factor: 0.5,
            max_backtracks: 20,
            levenberg_floor: 1e-8,
        }
    }
}

impl FitOptions {
    pub(crate) fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::Domain("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(Error::Domain("max_iter must be at least 1".into()));
        }
        if !(self.initial_alpha > 0.0 && self.initial_alpha <= 1.0) {
            return Err(Error::Domain("initial_alpha must lie in (0, 1]".into()));
        }
        if !(self.backtrack_factor > 0.0 && self.backtrack_factor < 1.0) {
            return Err(Error::Domain("backtrack_factor must lie in (0, 1)".into()));
        }
        if self.max_backtracks == 0 {
            return Err(Error::Domain("max_backtracks must be at least 1".into()));
        }
        if !(self.levenberg_floor > 0.0) {
            return Err(Error::Domain("levenberg_floor must be positive".into()));
        }
        Ok(())
    }
}

/// State after one accepted outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationRecord {
    pub objective: f64,
    pub grad_supnorm: f64,
    /// Accepted step fraction of the (tau, zeta) line search; 0 if skipped.
    pub alpha_tz: f64,
    /// Accepted step fraction of the geodesic line search; 0 if skipped.
    pub alpha_b: f64,
}

/// Outcome of [`fit`].
#[derive(Debug, Clone)]
pub struct FitReport {
    /// Last accepted parameters in canonical form.
    pub params: ModelParams,
    pub converged: bool,
    pub iterations: usize,
    pub final_grad_supnorm: f64,
    pub neg_loglik: f64,
    pub trace: Vec<IterationRecord>,
    pub failure_reason: Option<String>,
}

fn combined_supnorm(params: &ModelParams, eval: &Evaluation) -> Result<f64> {
    let tangent = project_to_tangent(&params.b, &eval.grad_b)?;
    Ok(eval.grad_tz.amax().max(tangent.sup_norm()))
}

/// Newton direction -(H + shift I)^{-1} g with the smallest power-of-ten
/// shift (starting from `floor`, or none) that makes the Cholesky succeed.
fn damped_newton_direction(
    hess: &DMatrix<f64>,
    grad: &DVector<f64>,
    floor: f64,
) -> Result<DVector<f64>> {
    if let Some(chol) = Cholesky::new(hess.clone()) {
        return Ok(-chol.solve(grad));
    }
    let mut shift = floor;
    while shift <= LEVENBERG_CAP {
        let shifted = hess + DMatrix::identity(hess.nrows(), hess.ncols()) * shift;
        if let Some(chol) = Cholesky::new(shifted) {
            return Ok(-chol.solve(grad));
        }
        shift *= 10.0;
    }
    Err(Error::Indefinite(format!(
        "log-scale Hessian not positive definite even with diagonal shift {LEVENBERG_CAP:.0e}"
    )))
}

fn line_search_tz(
    params: &ModelParams,
    caches: &[SubjectCache],
    current: f64,
    delta: &DVector<f64>,
    start_alpha: f64,
    opts: &FitOptions,
) -> Option<(ModelParams, f64)> {
    let r = params.num_components();
    let mut alpha = start_alpha;
    for _ in 0..opts.max_backtracks {
        let tau = params.tau + alpha * delta[0];
        let zeta = &params.zeta + delta.rows(1, r) * alpha;
        if let Ok(cand) = ModelParams::new(params.b.clone(), zeta, tau)
            && let Ok(obj) = neg_loglik(&cand, caches)
            && obj < current
        {
            return Some((cand, alpha));
        }
        alpha *= opts.backtrack_factor;
    }
    None
}

fn line_search_b(
    params: &ModelParams,
    caches: &[SubjectCache],
    current: f64,
    dir: &crate::stiefel::TangentVector,
    start_alpha: f64,
    opts: &FitOptions,
) -> Option<(ModelParams, f64)> {
    let mut alpha = start_alpha;
    for _ in 0..opts.max_backtracks {
        if let Ok(point) = geodesic_step(&params.b, dir, alpha)
            && let Ok(cand) = ModelParams::new(point, params.zeta.clone(), params.tau)
            && let Ok(obj) = neg_loglik(&cand, caches)
            && obj < current
        {
            return Some((cand, alpha));
        }
        alpha *= opts.backtrack_factor;
    }
    None
}

/// Minimizes the negative log-likelihood over (B, zeta, tau) starting from
/// `init`. Basis and component counts are taken from `init`; the caches must
/// share its basis dimension.
pub fn fit(caches: &[SubjectCache], init: &ModelParams, opts: &FitOptions) -> Result<FitReport> {
    opts.validate()?;
    if caches.is_empty() {
        return Err(Error::Empty("no subjects to fit".into()));
    }
    if init.num_basis() != caches[0].phi.nrows() {
        return Err(Error::Dimension(format!(
            "initial frame has {} rows but the design has {} basis functions",
            init.num_basis(),
            caches[0].phi.nrows()
        )));
    }

    let mut params = init.clone();
    let mut trace = Vec::new();
    let mut iterations = 0usize;
    let mut converged = false;
    let mut failure: Option<String> = None;

    let mut eval = match Evaluation::new(&params, caches) {
        Ok(e) => e,
        Err(e) => {
            return Ok(FitReport {
                params: canonicalize(&params),
                converged: false,
                iterations: 0,
                final_grad_supnorm: f64::NAN,
                neg_loglik: f64::NAN,
                trace,
                failure_reason: Some(format!("initial evaluation failed: {e}")),
            });
        }
    };

    loop {
        let sup = combined_supnorm(&params, &eval)?;
        if sup <= opts.tol {
            converged = true;
            break;
        }
        if iterations >= opts.max_iter {
            failure = Some(format!(
                "gradient sup-norm {sup:.3e} still above {:.3e} after {} iterations",
                opts.tol, opts.max_iter
            ));
            break;
        }
        iterations += 1;
        let schedule_alpha = if iterations <= opts.damped_iters {
            opts.initial_alpha
        } else {
            1.0
        };

        // (a) Damped Newton in (tau, zeta). Skipped when this block's own
        // gradient is already below tolerance: a strict-decrease line search
        // cannot be expected to succeed at a block-stationary point.
        let mut alpha_tz = 0.0;
        if eval.grad_tz.amax() > opts.tol {
            let delta =
                match damped_newton_direction(&eval.hess_tz, &eval.grad_tz, opts.levenberg_floor) {
                    Ok(d) => d,
                    Err(e) => {
                        failure = Some(format!("iteration {iterations}: {e}"));
                        break;
                    }
                };
            let Some((next, alpha)) =
                line_search_tz(&params, caches, eval.objective, &delta, schedule_alpha, opts)
            else {
                failure = Some(format!(
                    "iteration {iterations}: no objective decrease along the (tau, zeta) direction"
                ));
                break;
            };
            params = next;
            alpha_tz = alpha;
            eval = match Evaluation::new(&params, caches) {
                Ok(e) => e,
                Err(e) => {
                    failure = Some(format!("iteration {iterations}: {e}"));
                    break;
                }
            };
        }

        // (b) Newton step in B along a geodesic, skipped at block
        // stationarity for the same reason.
        let mut alpha_b = 0.0;
        let tangent_grad = project_to_tangent(&params.b, &eval.grad_b)?;
        if tangent_grad.sup_norm() > opts.tol {
            let dir = {
                let apply = |d: &DMatrix<f64>| eval.hess_b_apply_raw(&params, caches, d);
                match solve_newton_system(&params.b, &eval.grad_b, apply) {
                    Ok(d) => d,
                    Err(e) => {
                        failure = Some(format!("iteration {iterations}: {e}"));
                        break;
                    }
                }
            };
            let Some((next, alpha)) =
                line_search_b(&params, caches, eval.objective, &dir, schedule_alpha, opts)
            else {
                failure = Some(format!(
                    "iteration {iterations}: no objective decrease along the geodesic"
                ));
                break;
            };
            params = next;
            alpha_b = alpha;
            eval = match Evaluation::new(&params, caches) {
                Ok(e) => e,
                Err(e) => {
                    failure = Some(format!("iteration {iterations}: {e}"));
                    break;
                }
            };
        }

        trace.push(IterationRecord {
            objective: eval.objective,
            grad_supnorm: combined_supnorm(&params, &eval)?,
            alpha_tz,
            alpha_b,
        });
    }

    let final_grad_supnorm = combined_supnorm(&params, &eval)?;
    Ok(FitReport {
        params: canonicalize(&params),
        converged,
        iterations,
        final_grad_supnorm,
        neg_loglik: eval.objective,
        trace,
        failure_reason: failure,
    })
}

/// Resolves the eigencomponent ambiguities: zeta sorted non-increasing with
/// the matching column permutation of B, and each column's first entry of
/// magnitude above 1e-10 made positive. The fitted covariance is unchanged.
pub fn canonicalize(params: &ModelParams) -> ModelParams {
    let r = params.num_components();
    let b = params.b.matrix();
    let mut order: Vec<usize> = (0..r).collect();
    order.sort_by(|&i, &j| params.zeta[j].total_cmp(&params.zeta[i]));

    let mut cols = DMatrix::zeros(b.nrows(), r);
    let mut zeta = DVector::zeros(r);
    for (new_k, &old_k) in order.iter().enumerate() {
        let mut col = b.column(old_k).clone_owned();
        if let Some(first) = col.iter().find(|v| v.abs() > 1e-10)
            && *first < 0.0
        {
            col.neg_mut();
        }
        cols.set_column(new_k, &col);
        zeta[new_k] = params.zeta[old_k];
    }
    let point = StiefelPoint::new(cols).expect("column permutation and sign flips preserve frames");
    ModelParams::new(point, zeta, params.tau).expect("dimensions unchanged")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::BasisSystem;
    use crate::likelihood::SubjectCache;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha12Rng) -> f64 {
        StandardNormal.sample(rng)
    }

    /// Data drawn from the model itself: y = Phi' B sqrt(L) xi + sigma eps.
    fn model_instance(
        seed: u64,
        n: usize,
        num_basis: usize,
        lambda: &[f64],
        sigma2: f64,
    ) -> (ModelParams, Vec<SubjectCache>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let r = lambda.len();
        let basis = BasisSystem::new(num_basis, 4.min(num_basis)).unwrap();
        let b = StiefelPoint::orthonormalized(DMatrix::from_fn(num_basis, r, |_, _| {
            normal(&mut rng)
        }))
        .unwrap();
        let zeta = DVector::from_iterator(r, lambda.iter().map(|l| f64::ln(*l)));
        let truth = ModelParams::new(b, zeta, sigma2.ln()).unwrap();

        let caches = (0..n)
            .map(|_| {
                let m = rng.random_range(2..=8);
                let times: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
                let phi = basis.evaluate_design(&times).unwrap();
                let xi = DVector::from_fn(r, |_, _| normal(&mut rng));
                let scores = DVector::from_iterator(
                    r,
                    lambda.iter().zip(xi.iter()).map(|(l, x)| l.sqrt() * x),
                );
                let mean = phi.transpose() * truth.b.matrix() * scores;
                let y: Vec<f64> = (0..m)
                    .map(|j| mean[j] + sigma2.sqrt() * normal(&mut rng))
                    .collect();
                SubjectCache::new(&basis, &times, &y).unwrap()
            })
            .collect();
        (truth, caches)
    }

    fn perturbed(truth: &ModelParams, seed: u64, scale: f64) -> ModelParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (m, r) = (truth.num_basis(), truth.num_components());
        let noise = DMatrix::from_fn(m, r, |_, _| normal(&mut rng));
        let b = StiefelPoint::orthonormalized(truth.b.matrix() + noise * scale).unwrap();
        let zeta = truth.zeta.map(|z| z + scale);
        ModelParams::new(b, zeta, truth.tau - scale).unwrap()
    }

    #[test]
    fn fit_converges_on_model_data() {
        let (truth, caches) = model_instance(41, 120, 4, &[1.0, 0.4], 0.0625);
        let init = perturbed(&truth, 42, 0.1);
        let opts = FitOptions::default();
        let report = fit(&caches, &init, &opts).unwrap();

        assert!(report.converged, "failure: {:?}", report.failure_reason);
        assert!(report.final_grad_supnorm <= opts.tol);
        for pair in report.trace.windows(2) {
            assert!(pair[1].objective <= pair[0].objective);
        }
        let p = &report.params;
        let defect = (p.b.matrix().transpose() * p.b.matrix() - DMatrix::identity(2, 2)).amax();
        assert!(defect <= 1e-8);
        let lam = p.eigenvalues();
        assert!(lam.iter().all(|l| *l > 0.0));
        assert!(lam[0] >= lam[1]);
        assert!(p.noise_variance() > 0.0);
    }

    #[test]
    fn refit_from_optimum_is_stationary() {
        let (truth, caches) = model_instance(43, 80, 4, &[1.0, 0.4], 0.0625);
        let opts = FitOptions::default();
        let first = fit(&caches, &perturbed(&truth, 44, 0.1), &opts).unwrap();
        assert!(first.converged);

        let second = fit(&caches, &first.params, &opts).unwrap();
        assert!(second.converged);
        assert!(second.iterations <= 2);
        let movement = (second.params.b.matrix() - first.params.b.matrix()).amax();
        assert!(movement <= 1e-6);
    }

    #[test]
    fn fit_is_deterministic() {
        let (truth, caches) = model_instance(45, 60, 4, &[0.8, 0.3], 0.04);
        let init = perturbed(&truth, 46, 0.05);
        let opts = FitOptions::default();
        let a = fit(&caches, &init, &opts).unwrap();
        let b = fit(&caches, &init, &opts).unwrap();
        assert_eq!(a.neg_loglik, b.neg_loglik);
        assert_eq!(a.params.b.matrix(), b.params.b.matrix());
        assert_eq!(a.params.zeta, b.params.zeta);
        assert_eq!(a.params.tau, b.params.tau);
        assert_eq!(a.trace, b.trace);
    }

    #[test]
    fn iteration_cap_is_reported_not_raised() {
        let (truth, caches) = model_instance(47, 40, 4, &[1.0, 0.4], 0.0625);
        let init = perturbed(&truth, 48, 0.2);
        let opts = FitOptions {
            tol: 1e-15,
            max_iter: 2,
            ..FitOptions::default()
        };
        let report = fit(&caches, &init, &opts).unwrap();
        assert!(!report.converged);
        assert!(report.iterations <= 2);
        assert!(report.failure_reason.unwrap().contains("iterations"));
    }

    #[test]
    fn invalid_options_are_rejected() {
        let (truth, caches) = model_instance(49, 10, 4, &[1.0], 0.04);
        for bad in [
            FitOptions {
                tol: 0.0,
                ..FitOptions::default()
            },
            FitOptions {
                max_iter: 0,
                ..FitOptions::default()
            },
            FitOptions {
                initial_alpha: 1.5,
                ..FitOptions::default()
            },
            FitOptions {
                backtrack_factor: 1.0,
                ..FitOptions::default()
            },
        ] {
            assert!(fit(&caches, &truth, &bad).is_err());
        }
    }

    #[test]
    fn levenberg_uses_smallest_sufficient_shift() {
        let hess = DMatrix::from_diagonal(&DVector::from_column_slice(&[1.0, -0.5]));
        let grad = DVector::from_column_slice(&[1.0, 1.0]);
        let delta = damped_newton_direction(&hess, &grad, 1e-8).unwrap();
        // Shifts 1e-8..1e-1 leave the second diagonal entry negative; 1.0 is
        // the first power of ten that works.
        let expected = DVector::from_column_slice(&[-1.0 / 2.0, -1.0 / 0.5]);
        assert!((delta - expected).amax() < 1e-12);
    }

    #[test]
    fn levenberg_ladder_exhaustion_is_an_error() {
        let hess = DMatrix::from_diagonal(&DVector::from_column_slice(&[-1e9]));
        let grad = DVector::from_column_slice(&[1.0]);
        assert!(matches!(
            damped_newton_direction(&hess, &grad, 1e-8),
            Err(Error::Indefinite(_))
        ));
    }

    #[test]
    fn canonicalize_fixes_order_and_sign() {
        let b = StiefelPoint::new(DMatrix::from_column_slice(
            3,
            2,
            &[0.0, 0.0, 1.0, -1.0, 0.0, 0.0],
        ))
        .unwrap();
        let params =
            ModelParams::new(b, DVector::from_column_slice(&[-1.0, 0.5]), 0.0).unwrap();
        let canon = canonicalize(&params);
        assert_eq!(canon.zeta, DVector::from_column_slice(&[0.5, -1.0]));
        let expected =
            DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(canon.b.matrix(), &expected);

        let again = canonicalize(&canon);
        assert_eq!(again.b.matrix(), canon.b.matrix());
        assert_eq!(again.zeta, canon.zeta);
    }

    #[test]
    fn canonicalize_preserves_objective() {
        let (raw, caches) = model_instance(50, 30, 5, &[1.0, 0.5, 0.2], 0.04);
        let truth = canonicalize(&raw);
        let shuffled = {
            let b = truth.b.matrix();
            let mut cols = DMatrix::zeros(5, 3);
            cols.set_column(0, &(-b.column(2)));
            cols.set_column(1, &b.column(0).clone_owned());
            cols.set_column(2, &(-b.column(1)));
            let zeta = DVector::from_column_slice(&[truth.zeta[2], truth.zeta[0], truth.zeta[1]]);
            ModelParams::new(StiefelPoint::new(cols).unwrap(), zeta, truth.tau).unwrap()
        };
        let canon = canonicalize(&shuffled);
        let before = neg_loglik(&shuffled, &caches).unwrap();
        let after = neg_loglik(&canon, &caches).unwrap();
        assert!((before - after).abs() <= 1e-12 * (1.0 + before.abs()));
        assert_eq!(canon.b.matrix(), truth.b.matrix());
    }
}
