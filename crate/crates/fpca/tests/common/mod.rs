//! Shared oracle helpers for integration suites: a dense computation path
//! for the objective and its derivatives that inverts each subject's full
//! covariance directly, avoiding the library's small-matrix identities.
//! Everything here works for an arbitrary coefficient matrix, orthonormal
//! or not, so it also supplies off-manifold values for finite differences.

use fpca::likelihood::SubjectCache;
use nalgebra::{Cholesky, DMatrix, DVector};

/// Per-subject pieces of the dense path: P = sigma2 I + H Lambda H' with
/// H = phi' b, its Cholesky solve products, and the log determinant.
struct DenseSubject {
    h: DMatrix<f64>,
    p_inv: DMatrix<f64>,
    v: DVector<f64>,
    value: f64,
}

fn dense_subject(
    cache: &SubjectCache,
    b: &DMatrix<f64>,
    lambda: &DVector<f64>,
    sigma2: f64,
) -> DenseSubject {
    let m = cache.len();
    let h = cache.phi.transpose() * b;
    let mut p = DMatrix::identity(m, m) * sigma2;
    for k in 0..lambda.len() {
        let col = h.column(k);
        p.ger(lambda[k], &col, &col, 1.0);
    }
    let chol = Cholesky::new(p).expect("dense covariance is positive definite");
    let l = chol.l();
    let log_det = 2.0 * (0..m).map(|i| l[(i, i)].ln()).sum::<f64>();
    let v = chol.solve(&cache.ytilde);
    let value = cache.ytilde.dot(&v) + log_det;
    DenseSubject {
        h,
        p_inv: chol.inverse(),
        v,
        value,
    }
}

pub fn dense_value(
    b: &DMatrix<f64>,
    zeta: &DVector<f64>,
    tau: f64,
    caches: &[SubjectCache],
) -> f64 {
    let lambda = zeta.map(f64::exp);
    caches
        .iter()
        .map(|c| dense_subject(c, b, &lambda, tau.exp()).value)
        .sum()
}

/// Derivative of P in each (tau, zeta_1, ..) direction; the second
/// derivative in the same direction is the same matrix for every block.
fn dp_list(sub: &DenseSubject, lambda: &DVector<f64>, sigma2: f64) -> Vec<DMatrix<f64>> {
    let m = sub.v.len();
    let mut list = vec![DMatrix::identity(m, m) * sigma2];
    for k in 0..lambda.len() {
        let col = sub.h.column(k);
        let mut dp = DMatrix::zeros(m, m);
        dp.ger(lambda[k], &col, &col, 1.0);
        list.push(dp);
    }
    list
}

pub fn dense_grad_tz(
    b: &DMatrix<f64>,
    zeta: &DVector<f64>,
    tau: f64,
    caches: &[SubjectCache],
) -> DVector<f64> {
    let lambda = zeta.map(f64::exp);
    let sigma2 = tau.exp();
    let mut grad = DVector::zeros(zeta.len() + 1);
    for cache in caches {
        let sub = dense_subject(cache, b, &lambda, sigma2);
        for (j, dp) in dp_list(&sub, &lambda, sigma2).iter().enumerate() {
            grad[j] += (&sub.p_inv * dp).trace() - (dp * &sub.v).dot(&sub.v);
        }
    }
    grad
}

pub fn dense_hess_tz(
    b: &DMatrix<f64>,
    zeta: &DVector<f64>,
    tau: f64,
    caches: &[SubjectCache],
) -> DMatrix<f64> {
    let lambda = zeta.map(f64::exp);
    let sigma2 = tau.exp();
    let dim = zeta.len() + 1;
    let mut hess = DMatrix::zeros(dim, dim);
    for cache in caches {
        let sub = dense_subject(cache, b, &lambda, sigma2);
        let dps = dp_list(&sub, &lambda, sigma2);
        let solved: Vec<DMatrix<f64>> = dps.iter().map(|dp| &sub.p_inv * dp).collect();
        for j in 0..dim {
            for l in 0..dim {
                let mut val = -(&solved[l] * &solved[j]).trace()
                    + (&dps[l] * &sub.p_inv * (&dps[j] * &sub.v)).dot(&sub.v)
                    + (&dps[j] * &sub.p_inv * (&dps[l] * &sub.v)).dot(&sub.v);
                if j == l {
                    val += solved[j].trace() - (&dps[j] * &sub.v).dot(&sub.v);
                }
                hess[(j, l)] += val;
            }
        }
    }
    hess
}

pub fn dense_grad_b(
    b: &DMatrix<f64>,
    zeta: &DVector<f64>,
    tau: f64,
    caches: &[SubjectCache],
) -> DMatrix<f64> {
    let lambda = zeta.map(f64::exp);
    let sigma2 = tau.exp();
    let scale = DMatrix::from_diagonal(&lambda);
    let mut grad = DMatrix::zeros(b.nrows(), b.ncols());
    for cache in caches {
        let sub = dense_subject(cache, b, &lambda, sigma2);
        let pih = &sub.p_inv * &sub.h;
        let vth = sub.v.transpose() * &sub.h;
        let inner = pih - &sub.v * vth;
        grad += 2.0 * &cache.phi * inner * &scale;
    }
    grad
}

/// Euclidean second-derivative action along direction `d`, summed over
/// subjects, by differentiating the dense gradient formula term by term.
pub fn dense_hess_b_apply(
    b: &DMatrix<f64>,
    zeta: &DVector<f64>,
    tau: f64,
    caches: &[SubjectCache],
    d: &DMatrix<f64>,
) -> DMatrix<f64> {
    let lambda = zeta.map(f64::exp);
    let sigma2 = tau.exp();
    let scale = DMatrix::from_diagonal(&lambda);
    let mut out = DMatrix::zeros(b.nrows(), b.ncols());
    for cache in caches {
        let sub = dense_subject(cache, b, &lambda, sigma2);
        let h_d = cache.phi.transpose() * d;
        let dp = &h_d * &scale * sub.h.transpose() + &sub.h * &scale * h_d.transpose();
        let pih = &sub.p_inv * &sub.h;
        let t1 = &sub.p_inv * &h_d;
        let t2 = -(&sub.p_inv * (&dp * &pih));
        let t3 = (&sub.p_inv * (&dp * &sub.v)) * (sub.v.transpose() * &sub.h);
        let t4 = &sub.v * (sub.v.transpose() * (&dp * &pih));
        let t5 = -(&sub.v * (sub.v.transpose() * &h_d));
        out += 2.0 * &cache.phi * (t1 + t2 + t3 + t4 + t5) * &scale;
    }
    out
}
