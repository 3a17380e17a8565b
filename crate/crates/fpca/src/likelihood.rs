//! Exact marginal negative log-likelihood and its derivatives.
//!
//! Subject i contributes, up to an additive constant,
//!
//!   l_i = y_i' P_i^-1 y_i + log det P_i,
//!   P_i = s2 I + Phi_i' B Lam B' Phi_i,
//!
//! with s2 = exp(tau) the noise variance and Lam = diag(exp(zeta)) the
//! eigenvalues. Every quantity is routed through the r x r matrix
//! Q_i = s2 Lam^-1 + B' Phi_i Phi_i' B, so no m_i x m_i matrix is ever
//! formed or factored:
//!
//!   P_i^-1 = s2^-1 (I - H_i Q_i^-1 H_i'),       H_i = Phi_i' B,
//!   log det P_i = (m_i - r) tau + sum(zeta) + log det Q_i.
//!
//! Per-subject values, gradients, and Hessian actions are retained because
//! the leave-one-curve-out approximation needs them individually.

use crate::basis::BasisSystem;
use crate::data::SparseDataset;
use crate::error::{Error, Result};
use crate::reduce::{tree_reduce, tree_sum};
use crate::stiefel::{StiefelPoint, TangentVector};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rayon::prelude::*;
use std::sync::atomic::{AtomicU64, Ordering};

/// Counts full likelihood passes over the data (diagnostic; lets tests pin
/// down how many passes an algorithm really made).
static LIKELIHOOD_PASSES: AtomicU64 = AtomicU64::new(0);

pub fn likelihood_passes() -> u64 {
    LIKELIHOOD_PASSES.load(Ordering::Relaxed)
}

/// Model parameters: frame B, log-eigenvalues zeta, log noise variance tau.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub b: StiefelPoint,
    pub zeta: DVector<f64>,
    pub tau: f64,
}

impl ModelParams {
    pub fn new(b: StiefelPoint, zeta: DVector<f64>, tau: f64) -> Result<Self> {
        if zeta.len() != b.ncols() {
            return Err(Error::Dimension(format!(
                "{} log-eigenvalues for a frame with {} columns",
                zeta.len(),
                b.ncols()
            )));
        }
        if !zeta.iter().all(|z| z.is_finite()) || !tau.is_finite() {
            return Err(Error::Domain("non-finite log-scale parameters".into()));
        }
        Ok(Self { b, zeta, tau })
    }

    pub fn num_basis(&self) -> usize {
        self.b.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.b.ncols()
    }

    pub fn eigenvalues(&self) -> DVector<f64> {
        self.zeta.map(f64::exp)
    }

    pub fn noise_variance(&self) -> f64 {
        self.tau.exp()
    }
}

/// Per-subject design quantities, computed once per basis.
#[derive(Debug, Clone)]
pub struct SubjectCache {
    pub times: Vec<f64>,
    /// M x m_i design of the orthonormalized basis at the subject's times.
    pub phi: DMatrix<f64>,
    /// Centered responses.
    pub ytilde: DVector<f64>,
    /// Phi Phi' (M x M).
    pub phi_phi_t: DMatrix<f64>,
    /// Phi ytilde (M).
    pub phi_y: DVector<f64>,
}

impl SubjectCache {
    pub fn new(basis: &BasisSystem, times: &[f64], centered: &[f64]) -> Result<Self> {
        if times.is_empty() {
            return Err(Error::Empty("subject with no measurements".into()));
        }
        if times.len() != centered.len() {
            return Err(Error::Dimension(format!(
                "{} times vs {} values",
                times.len(),
                centered.len()
            )));
        }
        let phi = basis.evaluate_design(times)?;
        let ytilde = DVector::from_column_slice(centered);
        let phi_phi_t = &phi * phi.transpose();
        let phi_y = &phi * &ytilde;
        Ok(Self {
            times: times.to_vec(),
            phi,
            ytilde,
            phi_phi_t,
            phi_y,
        })
    }

    pub fn len(&self) -> usize {
        self.ytilde.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ytilde.len() == 0
    }
}

/// Builds per-subject caches for a centered dataset.
pub fn build_caches(basis: &BasisSystem, data: &SparseDataset) -> Result<Vec<SubjectCache>> {
    if data.subjects().is_empty() {
        return Err(Error::Empty("dataset has no subjects".into()));
    }
    data.subjects()
        .iter()
        .map(|s| SubjectCache::new(basis, s.times(), s.values()))
        .collect()
}

/// Reusable factorization pieces for one subject at fixed parameters.
struct SubjectCore {
    m: usize,
    chol: Cholesky<f64, Dyn>,
    /// H'H (r x r).
    gram: DMatrix<f64>,
    /// B' Phi y (r).
    c: DVector<f64>,
    /// Q^-1 c.
    s: DVector<f64>,
    yty: f64,
    value: f64,
}

fn subject_core(params: &ModelParams, cache: &SubjectCache, index: usize) -> Result<SubjectCore> {
    let b = params.b.matrix();
    if cache.phi.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "cache built for {} basis functions, parameters have {}",
            cache.phi.nrows(),
            b.nrows()
        )));
    }
    let r = params.num_components();
    let m = cache.len();

    let h = cache.phi.transpose() * b;
    let gram = h.transpose() * &h;
    let mut q = gram.clone();
    for k in 0..r {
        q[(k, k)] += (params.tau - params.zeta[k]).exp();
    }
    let chol = q
        .cholesky()
        .ok_or_else(|| Error::Indefinite(format!("Q matrix of subject {index}")))?;
    let log_det_q: f64 = chol
        .l()
        .diagonal()
        .iter()
        .map(|d: &f64| d.ln())
        .sum::<f64>()
        * 2.0;

    let c = b.transpose() * &cache.phi_y;
    let s = chol.solve(&c);
    let yty = cache.ytilde.norm_squared();
    let f1 = (-params.tau).exp() * (yty - c.dot(&s));
    let f2 = (m as f64 - r as f64) * params.tau + params.zeta.sum() + log_det_q;
    Ok(SubjectCore {
        m,
        chol,
        gram,
        c,
        s,
        yty,
        value: f1 + f2,
    })
}

/// Everything the optimizer and the model-selection score need from one
/// subject at fixed parameters. Gradient layout: [tau, zeta_1, .., zeta_r].
#[derive(Debug, Clone)]
pub struct SubjectTerms {
    pub value: f64,
    pub grad_tz: DVector<f64>,
    pub hess_tz: DMatrix<f64>,
    /// Euclidean gradient in B (before tangent projection).
    pub grad_b: DMatrix<f64>,
    q_inv: DMatrix<f64>,
    s: DVector<f64>,
    /// Phi Phi' B (M x r).
    j: DMatrix<f64>,
    /// J s - Phi y (M).
    js_minus_g: DVector<f64>,
    inv_s2: f64,
}

fn subject_terms(params: &ModelParams, cache: &SubjectCache, index: usize) -> Result<SubjectTerms> {
    let core = subject_core(params, cache, index)?;
    let b = params.b.matrix();
    let r = params.num_components();
    let inv_s2 = (-params.tau).exp();
    let s2 = params.tau.exp();
    let lam = params.eigenvalues();

    let SubjectCore {
        m,
        chol,
        gram,
        c,
        s,
        yty,
        value,
    } = core;

    // Vectors against P^-1 and P^-2, all through the r x r factor:
    //   a = H'P^-1 y, b2 = H'P^-2 y, vtv = y'P^-2 y, vpv = y'P^-3 y.
    let gs = &gram * &s;
    let a = (&c - &gs) * inv_s2;
    let qinv_a = chol.solve(&a);
    let vtv = inv_s2 * inv_s2 * (yty - 2.0 * c.dot(&s) + s.dot(&gs));
    let vpv = inv_s2 * (vtv - a.dot(&qinv_a));
    let b2 = (&a - &gram * &qinv_a) * inv_s2;

    // S = H'P^-1 H and R = H'P^-2 H.
    let qg = chol.solve(&gram);
    let s_mat = (&gram - &gram * &qg) * inv_s2;
    let s_mat = (&s_mat + s_mat.transpose()) * 0.5;
    let r_mat = (&s_mat - &s_mat * &qg) * inv_s2;
    let r_mat = (&r_mat + r_mat.transpose()) * 0.5;
    let tr_qg = qg.trace();
    let tr_p_inv = inv_s2 * (m as f64 - tr_qg);
    let tr_p_inv2 = inv_s2 * inv_s2 * (m as f64 - 2.0 * tr_qg + (&qg * &qg).trace());

    let mut grad_tz = DVector::zeros(r + 1);
    grad_tz[0] = -s2 * vtv + s2 * tr_p_inv;
    for k in 0..r {
        grad_tz[k + 1] = -lam[k] * a[k] * a[k] + lam[k] * s_mat[(k, k)];
    }

    let mut hess_tz = DMatrix::zeros(r + 1, r + 1);
    hess_tz[(0, 0)] =
        2.0 * s2 * s2 * vpv - s2 * vtv + s2 * tr_p_inv - s2 * s2 * tr_p_inv2;
    for k in 0..r {
        let cross = 2.0 * lam[k] * s2 * a[k] * b2[k] - lam[k] * s2 * r_mat[(k, k)];
        hess_tz[(0, k + 1)] = cross;
        hess_tz[(k + 1, 0)] = cross;
        // Mirrored assignment keeps the matrix bitwise symmetric; the two
        // index orders would otherwise round differently in the last ulp.
        for l in 0..=k {
            let mut v = 2.0 * lam[k] * lam[l] * a[k] * s_mat[(k, l)] * a[l]
                - lam[k] * lam[l] * s_mat[(k, l)] * s_mat[(k, l)];
            if k == l {
                v += -lam[k] * a[k] * a[k] + lam[k] * s_mat[(k, k)];
            }
            hess_tz[(k + 1, l + 1)] = v;
            hess_tz[(l + 1, k + 1)] = v;
        }
    }

    let j = &cache.phi_phi_t * b;
    let js_minus_g = &j * &s - &cache.phi_y;
    let q_inv = chol.inverse();
    let grad_b = (&js_minus_g * s.transpose()) * (2.0 * inv_s2) + (&j * &q_inv) * 2.0;

    Ok(SubjectTerms {
        value,
        grad_tz,
        hess_tz,
        grad_b,
        q_inv,
        s,
        j,
        js_minus_g,
        inv_s2,
    })
}

/// Euclidean second-derivative action of one subject's term on an arbitrary
/// direction (before any tangent projection).
fn subject_hess_b_raw(
    terms: &SubjectTerms,
    cache: &SubjectCache,
    b: &DMatrix<f64>,
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let dp = &cache.phi_phi_t * d;
    let e_mat = d.transpose() * &terms.j + b.transpose() * &dp;
    let t1 = d.transpose() * &cache.phi_y;
    let e1 = &terms.q_inv * (t1 - &e_mat * &terms.s);
    let w = d * &terms.s + b * &e1;
    let h1 = ((&cache.phi_phi_t * w) * terms.s.transpose() + &terms.js_minus_g * e1.transpose())
        * (2.0 * terms.inv_s2);
    let h2 = (&dp - &terms.j * (&terms.q_inv * e_mat)) * &terms.q_inv * 2.0;
    h1 + h2
}

/// Full-data evaluation: objective, summed derivatives, and the per-subject
/// terms needed for Hessian actions and the cross-validation score.
pub struct Evaluation {
    pub objective: f64,
    pub grad_tz: DVector<f64>,
    pub hess_tz: DMatrix<f64>,
    /// Summed Euclidean gradient in B.
    pub grad_b: DMatrix<f64>,
    pub per_subject: Vec<SubjectTerms>,
}

impl Evaluation {
    /// One full pass over the subjects.
    pub fn new(params: &ModelParams, caches: &[SubjectCache]) -> Result<Self> {
        if caches.is_empty() {
            return Err(Error::Empty("no subjects to evaluate".into()));
        }
        LIKELIHOOD_PASSES.fetch_add(1, Ordering::Relaxed);
        let per_subject: Vec<SubjectTerms> = caches
            .par_iter()
            .enumerate()
            .map(|(i, cache)| subject_terms(params, cache, i))
            .collect::<Result<_>>()?;

        let values: Vec<f64> = per_subject.iter().map(|t| t.value).collect();
        let objective = tree_sum(&values);
        let grads: Vec<DVector<f64>> = per_subject.iter().map(|t| t.grad_tz.clone()).collect();
        let grad_tz = tree_reduce(&grads, &|a, b| a + b).expect("nonempty");
        let hessians: Vec<DMatrix<f64>> = per_subject.iter().map(|t| t.hess_tz.clone()).collect();
        let hess_tz = tree_reduce(&hessians, &|a, b| a + b).expect("nonempty");
        let grads_b: Vec<DMatrix<f64>> = per_subject.iter().map(|t| t.grad_b.clone()).collect();
        let grad_b = tree_reduce(&grads_b, &|a, b| a + b).expect("nonempty");

        Ok(Self {
            objective,
            grad_tz,
            hess_tz,
            grad_b,
            per_subject,
        })
    }

    /// Tangent-projected second-derivative action of the full objective:
    /// H(D) - B H(D)'B with H the summed Euclidean action.
    ///
    /// `caches` must be the collection this evaluation was computed from.
    pub fn hess_b_apply_raw(
        &self,
        params: &ModelParams,
        caches: &[SubjectCache],
        d: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let b = params.b.matrix();
        let pieces: Vec<DMatrix<f64>> = self
            .per_subject
            .iter()
            .zip(caches)
            .map(|(t, c)| subject_hess_b_raw(t, c, b, d))
            .collect();
        let h = tree_reduce(&pieces, &|a, b| a + b).expect("nonempty");
        &h - b * (h.transpose() * b)
    }

    /// Euclidean second-derivative action of subject `i` alone.
    pub fn subject_hess_b_raw(
        &self,
        params: &ModelParams,
        caches: &[SubjectCache],
        i: usize,
        d: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        subject_hess_b_raw(&self.per_subject[i], &caches[i], params.b.matrix(), d)
    }
}

/// Negative log-likelihood (additive constants dropped). Cheap pass without
/// derivatives, used by line searches.
pub fn neg_loglik(params: &ModelParams, caches: &[SubjectCache]) -> Result<f64> {
    if caches.is_empty() {
        return Err(Error::Empty("no subjects to evaluate".into()));
    }
    LIKELIHOOD_PASSES.fetch_add(1, Ordering::Relaxed);
    let values: Vec<f64> = caches
        .par_iter()
        .enumerate()
        .map(|(i, cache)| subject_core(params, cache, i).map(|c| c.value))
        .collect::<Result<_>>()?;
    Ok(tree_sum(&values))
}

/// The r x r matrix Q_i = s2 Lam^-1 + B' Phi_i Phi_i' B of one subject,
/// verified positive definite.
pub fn q_matrix(params: &ModelParams, cache: &SubjectCache) -> Result<DMatrix<f64>> {
    let b = params.b.matrix();
    if cache.phi.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "cache built for {} basis functions, parameters have {}",
            cache.phi.nrows(),
            b.nrows()
        )));
    }
    let h = cache.phi.transpose() * b;
    let mut q = h.transpose() * &h;
    for k in 0..params.num_components() {
        q[(k, k)] += (params.tau - params.zeta[k]).exp();
    }
    if q.clone().cholesky().is_none() {
        return Err(Error::Indefinite("Q matrix".into()));
    }
    Ok(q)
}

/// Summed Euclidean gradient in B.
pub fn euclid_grad_b(params: &ModelParams, caches: &[SubjectCache]) -> Result<DMatrix<f64>> {
    Ok(Evaluation::new(params, caches)?.grad_b)
}

/// Summed gradient in (tau, zeta).
pub fn grad_tau_zeta(params: &ModelParams, caches: &[SubjectCache]) -> Result<DVector<f64>> {
    Ok(Evaluation::new(params, caches)?.grad_tz)
}

/// Summed Hessian in (tau, zeta).
pub fn hess_tau_zeta(params: &ModelParams, caches: &[SubjectCache]) -> Result<DMatrix<f64>> {
    Ok(Evaluation::new(params, caches)?.hess_tz)
}

/// Tangent-projected second-derivative action in B on a tangent direction.
pub fn hess_b_apply(
    params: &ModelParams,
    caches: &[SubjectCache],
    d: &TangentVector,
) -> Result<DMatrix<f64>> {
    if d.base() != params.b.matrix() {
        return Err(Error::BaseMismatch);
    }
    let eval = Evaluation::new(params, caches)?;
    Ok(eval.hess_b_apply_raw(params, caches, d.values()))
}
