//! Geometry of orthonormal frames.
//!
//! Eigenfunction coefficient matrices live on the Stiefel manifold
//! {B in R^(M x r) : B'B = I}. This module provides the canonical-metric
//! machinery needed by the optimizer: tangent projection, geodesics through
//! the exponential of a small skew-symmetric block, and the Newton system
//! whose unknown is a tangent direction.
//!
//! Conventions: `vec` stacks columns, and the Newton operator at B applied to
//! a tangent direction D is
//!
//!   hess(D) - B skew(F'D) - skew(DF')B - 1/2 (I - BB') D (B'F)
//!
//! with F the Euclidean gradient and skew(X) = (X - X')/2.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector, Dyn};

/// Accept frames whose orthonormality defect is below this without touching
/// them; repair by QR up to `REPAIR_TOL`; reject beyond.
const FRAME_TOL: f64 = 1e-8;
const REPAIR_TOL: f64 = 1e-6;
/// Tangency tolerance for B'D + D'B.
const SKEW_TOL: f64 = 1e-8;
/// Reciprocal-condition floor for the reduced Newton system.
const RCOND_FLOOR: f64 = 1e-12;

/// A point on the Stiefel manifold: an M x r matrix with orthonormal columns.
#[derive(Debug, Clone, PartialEq)]
pub struct StiefelPoint {
    values: DMatrix<f64>,
}

/// A tangent direction at a stored base point (B'D skew-symmetric).
#[derive(Debug, Clone)]
pub struct TangentVector {
    base: DMatrix<f64>,
    values: DMatrix<f64>,
}

/// The vectorized ambient Newton system before the tangent-space reduction.
#[derive(Debug, Clone)]
pub struct VecSystem {
    /// (Mr) x (Mr) matrix representing the Newton operator on vec(D).
    pub matrix: DMatrix<f64>,
    /// Right-hand side -vec(G) with G the projected gradient.
    pub rhs: DVector<f64>,
    /// Permutation with vec(D') = transpose_perm * vec(D).
    pub transpose_perm: DMatrix<f64>,
}

/// Thin QR with the sign convention diag(R) >= 0, so the output stays close
/// to an input that is already nearly orthonormal.
fn qr_orthonormalize(a: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let qr = a.clone().qr();
    let mut q = qr.q();
    let r = qr.r();
    for j in 0..q.ncols() {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    (q, r)
}

impl StiefelPoint {
    /// Wraps a frame, repairing orthonormality drift up to 1e-6 by QR and
    /// rejecting anything farther from the manifold.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let (m, r) = (values.nrows(), values.ncols());
        if r == 0 || m < r {
            return Err(Error::Dimension(format!(
                "frame must be tall with at least one column, got {m} x {r}"
            )));
        }
        let defect = (values.transpose() * &values - DMatrix::identity(r, r)).amax();
        if defect <= FRAME_TOL {
            return Ok(Self { values });
        }
        if defect <= REPAIR_TOL {
            let (q, _) = qr_orthonormalize(&values);
            return Ok(Self { values: q });
        }
        Err(Error::NotOrthonormal(defect))
    }

    /// Wraps a frame without the orthonormality check.
    ///
    /// The likelihood is a smooth function of the raw matrix entries, so
    /// finite-difference probes must evaluate it slightly off the manifold;
    /// that is the only intended use. Everything else wants [`Self::new`].
    pub fn new_unchecked(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    /// Orthonormalizes an arbitrary full-column-rank matrix by QR.
    pub fn orthonormalized(values: DMatrix<f64>) -> Result<Self> {
        let scale = values.amax().max(1.0);
        let (q, r) = qr_orthonormalize(&values);
        for j in 0..r.ncols() {
            if r[(j, j)].abs() < 1e-12 * scale {
                return Err(Error::SingularSystem(
                    "frame has (numerically) dependent columns".into(),
                ));
            }
        }
        Self::new(q)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn nrows(&self) -> usize {
        self.values.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.values.ncols()
    }

    /// Orthonormal basis of the orthogonal complement of the column span.
    pub fn complement(&self) -> DMatrix<f64> {
        let (m, r) = (self.nrows(), self.ncols());
        let mut aug = DMatrix::zeros(m, r + m);
        aug.view_mut((0, 0), (m, r)).copy_from(&self.values);
        aug.view_mut((0, r), (m, m))
            .copy_from(&DMatrix::identity(m, m));
        let q = aug.qr().q();
        q.columns(r, m - r).into_owned()
    }
}

impl TangentVector {
    /// Wraps a direction after checking tangency at `base`.
    pub fn new(base: &StiefelPoint, values: DMatrix<f64>) -> Result<Self> {
        if values.shape() != base.matrix().shape() {
            return Err(Error::Dimension(format!(
                "tangent shape {:?} does not match base {:?}",
                values.shape(),
                base.matrix().shape()
            )));
        }
        let a = base.matrix().transpose() * &values;
        let defect = (&a + a.transpose()).amax();
        if defect > SKEW_TOL {
            return Err(Error::NotSkew(defect));
        }
        Ok(Self {
            base: base.matrix().clone(),
            values,
        })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn base(&self) -> &DMatrix<f64> {
        &self.base
    }

    /// Max-norm of the direction.
    pub fn sup_norm(&self) -> f64 {
        self.values.amax()
    }
}

/// Projects a Euclidean gradient onto the tangent space at `base` under the
/// canonical metric: G - B G'B.
pub fn project_to_tangent(base: &StiefelPoint, euclid: &DMatrix<f64>) -> Result<TangentVector> {
    if euclid.shape() != base.matrix().shape() {
        return Err(Error::Dimension(format!(
            "gradient shape {:?} does not match base {:?}",
            euclid.shape(),
            base.matrix().shape()
        )));
    }
    let b = base.matrix();
    let projected = euclid - b * (euclid.transpose() * b);
    TangentVector::new(base, projected)
}

/// Canonical inner product tr(D1' (I - 1/2 BB') D2) of two tangent vectors
/// at the same base point.
pub fn canonical_inner(d1: &TangentVector, d2: &TangentVector) -> Result<f64> {
    if d1.base != d2.base {
        return Err(Error::BaseMismatch);
    }
    let full = d1.values.dot(&d2.values);
    let bd1 = d1.base.transpose() * &d1.values;
    let bd2 = d1.base.transpose() * &d2.values;
    Ok(full - 0.5 * bd1.dot(&bd2))
}

/// Matrix exponential exp(tX) of a skew-symmetric X through its SVD
/// X = U D V': exp(tX) = U cos(tD) U' + U sin(tD) V'.
pub fn exp_skew(x: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let p = x.nrows();
    if x.ncols() != p {
        return Err(Error::Dimension(format!(
            "exp of a non-square {} x {} matrix",
            p,
            x.ncols()
        )));
    }
    let defect = (x + x.transpose()).amax();
    if defect > 1e-10 {
        return Err(Error::NotSkew(defect));
    }
    if p == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }
    let svd = x.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd with u requested");
    let v_t = svd.v_t.as_ref().expect("svd with v_t requested");
    let cos_d = DMatrix::from_diagonal(&svd.singular_values.map(|s| (t * s).cos()));
    let sin_d = DMatrix::from_diagonal(&svd.singular_values.map(|s| (t * s).sin()));
    Ok(u * cos_d * u.transpose() + u * sin_d * v_t)
}

/// Walks the canonical-metric geodesic from `base` along tangent `dir` for
/// parameter `t`, staying on the manifold.
pub fn geodesic_step(base: &StiefelPoint, dir: &TangentVector, t: f64) -> Result<StiefelPoint> {
    if dir.base != *base.matrix() {
        return Err(Error::BaseMismatch);
    }
    let b = base.matrix();
    let r = base.ncols();

    let a = b.transpose() * dir.values();
    let defect = (&a + a.transpose()).amax();
    if defect > SKEW_TOL {
        return Err(Error::NotSkew(defect));
    }
    let a = (&a - a.transpose()) * 0.5;

    // Thin QR of the normal component of the direction.
    let normal = dir.values() - b * &a;
    let qr = normal.qr();
    let (q, rr) = (qr.q(), qr.r());

    // Skew block [[A, -R'], [R, 0]], filled so skewness is exact.
    let mut block = DMatrix::zeros(2 * r, 2 * r);
    for i in 0..r {
        for j in 0..r {
            block[(i, j)] = a[(i, j)];
            block[(i, r + j)] = -rr[(j, i)];
            block[(r + i, j)] = rr[(i, j)];
        }
    }
    let e = exp_skew(&block, t)?;
    let m_t = e.view((0, 0), (r, r));
    let n_t = e.view((r, 0), (r, r));
    StiefelPoint::new(b * m_t + q * n_t)
}

/// Reduced Newton system at a base point, factored once so that many
/// right-hand sides can be solved against the same operator.
pub struct NewtonSystem {
    base: StiefelPoint,
    /// Ambient operator and canonical right-hand side in vec coordinates.
    vec_system: VecSystem,
    /// Orthonormal embedding of the tangent space into vec coordinates.
    embed: DMatrix<f64>,
    /// SVD of embed' * matrix * embed; `None` when the tangent space is {0}.
    factor: Option<nalgebra::SVD<f64, Dyn, Dyn>>,
    rcond: f64,
}

/// Permutation matrix carrying vec(X) to vec(X') for X of shape m x r.
fn transpose_permutation(m: usize, r: usize) -> DMatrix<f64> {
    let mut p = DMatrix::zeros(m * r, m * r);
    for i in 0..m {
        for j in 0..r {
            p[(j + i * r, i + j * m)] = 1.0;
        }
    }
    p
}

fn vec_of(mat: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(mat.as_slice())
}

fn unvec(v: &DVector<f64>, m: usize, r: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(m, r, v.as_slice())
}

/// Orthonormal basis of the tangent space at `base` in vec coordinates:
/// B A / sqrt(2) over elementary skew A, then B_perp columns into each slot.
fn tangent_embedding(base: &StiefelPoint) -> DMatrix<f64> {
    let b = base.matrix();
    let (m, r) = (base.nrows(), base.ncols());
    let dim = r * (r - 1) / 2 + (m - r) * r;
    let mut embed = DMatrix::zeros(m * r, dim);
    let mut col = 0;
    let inv_sqrt2 = 0.5f64.sqrt();
    for k in 0..r {
        for l in (k + 1)..r {
            let mut dir = DMatrix::zeros(m, r);
            dir.set_column(l, &(b.column(k) * inv_sqrt2));
            dir.set_column(k, &(b.column(l) * (-inv_sqrt2)));
            embed.set_column(col, &vec_of(&dir));
            col += 1;
        }
    }
    if m > r {
        let perp = base.complement();
        for s in 0..(m - r) {
            for c in 0..r {
                let mut dir = DMatrix::zeros(m, r);
                dir.set_column(c, &perp.column(s).into_owned());
                embed.set_column(col, &vec_of(&dir));
                col += 1;
            }
        }
    }
    embed
}

impl NewtonSystem {
    /// Assembles and factors the Newton operator.
    ///
    /// `hess_apply` must implement the tangent-projected second-derivative
    /// action H(D) - B H(D)'B of the objective; the first-order correction
    /// terms of the canonical-metric Hessian are added here.
    pub fn build<F>(base: &StiefelPoint, euclid_grad: &DMatrix<f64>, hess_apply: F) -> Result<Self>
    where
        F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    {
        if euclid_grad.shape() != base.matrix().shape() {
            return Err(Error::Dimension(format!(
                "gradient shape {:?} does not match base {:?}",
                euclid_grad.shape(),
                base.matrix().shape()
            )));
        }
        let b = base.matrix();
        let (m, r) = (base.nrows(), base.ncols());
        let dim = m * r;

        let perm = transpose_permutation(m, r);
        let eye_r = DMatrix::<f64>::identity(r, r);
        let eye_m = DMatrix::<f64>::identity(m, m);
        let pi = &eye_m - b * b.transpose();

        // vec form of -B skew(F'D) - skew(DF')B - 1/2 Pi D (B'F), expanded
        // into A D, D K, C D K, and E D' F shapes.
        let bft = b * euclid_grad.transpose();
        let bf = b.transpose() * euclid_grad;
        let corrections = eye_r.kronecker(&bft).scale(-0.5)
            + bf.kronecker(&eye_m).scale(-0.5)
            + bf.transpose().kronecker(&pi).scale(-0.5)
            + (euclid_grad.transpose().kronecker(b) + b.transpose().kronecker(euclid_grad))
                .scale(0.5)
                * &perm;

        let mut matrix = corrections;
        let mut unit = DVector::zeros(dim);
        for j in 0..dim {
            unit[j] = 1.0;
            let col = hess_apply(&unvec(&unit, m, r));
            unit[j] = 0.0;
            matrix.column_mut(j).axpy(1.0, &vec_of(&col), 1.0);
        }

        let grad = project_to_tangent(base, euclid_grad)?;
        let rhs = -vec_of(grad.values());

        let embed = tangent_embedding(base);
        if embed.ncols() == 0 {
            return Ok(Self {
                base: base.clone(),
                vec_system: VecSystem {
                    matrix,
                    rhs,
                    transpose_perm: perm,
                },
                embed,
                factor: None,
                rcond: f64::INFINITY,
            });
        }

        let reduced = embed.transpose() * &matrix * &embed;
        let svd = reduced.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let rcond = if smax > 0.0 { smin / smax } else { 0.0 };
        if rcond < RCOND_FLOOR {
            return Err(Error::SingularSystem(format!(
                "reduced Newton system has reciprocal condition {rcond:.3e}"
            )));
        }
        Ok(Self {
            base: base.clone(),
            vec_system: VecSystem {
                matrix,
                rhs,
                transpose_perm: perm,
            },
            embed,
            factor: Some(svd),
            rcond,
        })
    }

    pub fn rcond(&self) -> f64 {
        self.rcond
    }

    pub fn vec_system(&self) -> &VecSystem {
        &self.vec_system
    }

    /// Solves operator(D) = rhs for a tangent right-hand side.
    pub fn solve(&self, rhs: &TangentVector) -> Result<TangentVector> {
        if rhs.base != *self.base.matrix() {
            return Err(Error::BaseMismatch);
        }
        let (m, r) = (self.base.nrows(), self.base.ncols());
        let rhs_vec = vec_of(rhs.values());
        let Some(factor) = &self.factor else {
            return TangentVector::new(&self.base, DMatrix::zeros(m, r));
        };
        let reduced_rhs = self.embed.transpose() * &rhs_vec;
        let x = factor
            .solve(&reduced_rhs, 0.0)
            .map_err(|e| Error::SingularSystem(e.into()))?;
        let delta_vec = &self.embed * x;

        // Both Newton equations must hold to near machine precision; a large
        // residual means the reduction silently lost the system.
        let residual = (&self.vec_system.matrix * &delta_vec - rhs_vec).amax();
        let tol = 1e-8 * (1.0 + rhs.values().amax());
        if residual > tol {
            return Err(Error::SingularSystem(format!(
                "Newton system residual {residual:.3e} exceeds {tol:.3e}"
            )));
        }
        TangentVector::new(&self.base, unvec(&delta_vec, m, r))
    }

    /// Solves for the Newton step: operator(D) = -G with G the projected
    /// gradient of the objective used at assembly.
    pub fn newton_step(&self) -> Result<TangentVector> {
        let (m, r) = (self.base.nrows(), self.base.ncols());
        let rhs = TangentVector::new(&self.base, unvec(&self.vec_system.rhs, m, r))?;
        self.solve(&rhs)
    }
}

/// One-shot Newton step at `base`: assembles, factors, and solves
/// operator(D) = -project(euclid_grad).
pub fn solve_newton_system<F>(
    base: &StiefelPoint,
    euclid_grad: &DMatrix<f64>,
    hess_apply: F,
) -> Result<TangentVector>
where
    F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
{
    NewtonSystem::build(base, euclid_grad, hess_apply)?.newton_step()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn random_matrix(rng: &mut ChaCha12Rng, m: usize, r: usize) -> DMatrix<f64> {
        DMatrix::from_fn(m, r, |_, _| StandardNormal.sample(rng))
    }

    fn random_point(rng: &mut ChaCha12Rng, m: usize, r: usize) -> StiefelPoint {
        StiefelPoint::orthonormalized(random_matrix(rng, m, r)).unwrap()
    }

    fn random_tangent(rng: &mut ChaCha12Rng, base: &StiefelPoint) -> TangentVector {
        project_to_tangent(base, &random_matrix(rng, base.nrows(), base.ncols())).unwrap()
    }

    #[test]
    fn construction_repairs_small_drift_and_rejects_large() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let b = random_point(&mut rng, 6, 3);
        let drifted = b.matrix() + DMatrix::from_element(6, 3, 1e-8);
        let repaired = StiefelPoint::new(drifted).unwrap();
        let defect =
            (repaired.matrix().transpose() * repaired.matrix() - DMatrix::identity(3, 3)).amax();
        assert!(defect <= 1e-8);

        let far = b.matrix() + DMatrix::from_element(6, 3, 0.1);
        assert!(matches!(
            StiefelPoint::new(far),
            Err(Error::NotOrthonormal(_))
        ));
    }

    #[test]
    fn tangent_construction_rejects_non_skew() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let b = random_point(&mut rng, 5, 2);
        let err = TangentVector::new(&b, b.matrix().clone());
        assert!(matches!(err, Err(Error::NotSkew(_))));
    }

    #[test]
    fn canonical_inner_known_values() {
        // B = first r columns of the identity; D with B'D = 0.
        let b = StiefelPoint::new(DMatrix::from_column_slice(
            4,
            2,
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0],
        ))
        .unwrap();
        let mut d = DMatrix::zeros(4, 2);
        d[(2, 0)] = 1.5;
        d[(3, 1)] = -0.5;
        let d = TangentVector::new(&b, d).unwrap();
        let expected = d.values().dot(d.values());
        assert_abs_diff_eq!(
            canonical_inner(&d, &d).unwrap(),
            expected,
            epsilon = 1e-14
        );

        // D = B A with A skew: half the Frobenius norm of A survives.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = random_point(&mut rng, 5, 3);
        let raw = random_matrix(&mut rng, 3, 3);
        let a = (&raw - raw.transpose()) * 0.5;
        let d = TangentVector::new(&p, p.matrix() * &a).unwrap();
        assert_abs_diff_eq!(
            canonical_inner(&d, &d).unwrap(),
            0.5 * a.dot(&a),
            epsilon = 1e-12
        );
    }

    #[test]
    fn canonical_inner_requires_same_base() {
        let mut rng = ChaCha12Rng::seed_from_u64(4);
        let b1 = random_point(&mut rng, 5, 2);
        let b2 = random_point(&mut rng, 5, 2);
        let d1 = random_tangent(&mut rng, &b1);
        let d2 = random_tangent(&mut rng, &b2);
        assert!(matches!(canonical_inner(&d1, &d2), Err(Error::BaseMismatch)));
    }

    #[test]
    fn exp_skew_rejects_non_skew_input() {
        let x = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]);
        assert!(matches!(exp_skew(&x, 1.0), Err(Error::NotSkew(_))));
    }

    /// Truncated Taylor series; trusted reference for small norms.
    fn exp_taylor(x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
        let p = x.nrows();
        let mut sum = DMatrix::identity(p, p);
        let mut term = DMatrix::identity(p, p);
        for k in 1..=30 {
            term = (&term * x) * (t / k as f64);
            sum += &term;
        }
        sum
    }

    #[test]
    fn exp_skew_matches_taylor_series() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        for p in [1usize, 2, 3, 5, 8] {
            let raw = random_matrix(&mut rng, p, p) * 0.2;
            let x = (&raw - raw.transpose()) * 0.5;
            let e = exp_skew(&x, 0.7).unwrap();
            assert!((e - exp_taylor(&x, 0.7)).amax() < 1e-12, "p = {p}");
        }
    }

    #[test]
    fn exp_skew_of_zero_is_identity() {
        let e = exp_skew(&DMatrix::zeros(4, 4), 2.0).unwrap();
        assert!((e - DMatrix::identity(4, 4)).amax() < 1e-14);
    }

    #[test]
    fn geodesic_matches_planar_rotation() {
        let b = StiefelPoint::new(DMatrix::from_column_slice(2, 1, &[1.0, 0.0])).unwrap();
        let theta = 0.9;
        let d = TangentVector::new(&b, DMatrix::from_column_slice(2, 1, &[0.0, theta])).unwrap();
        for t in [0.0, 0.3, 1.0] {
            let bt = geodesic_step(&b, &d, t).unwrap();
            assert_abs_diff_eq!(bt.matrix()[(0, 0)], (t * theta).cos(), epsilon = 1e-12);
            assert_abs_diff_eq!(bt.matrix()[(1, 0)], (t * theta).sin(), epsilon = 1e-12);
        }
    }

    #[test]
    fn geodesic_at_zero_returns_base() {
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let b = random_point(&mut rng, 6, 3);
        let d = random_tangent(&mut rng, &b);
        let b0 = geodesic_step(&b, &d, 0.0).unwrap();
        assert!((b0.matrix() - b.matrix()).amax() < 1e-12);
    }

    #[test]
    fn geodesic_handles_span_only_directions() {
        // Direction B A has zero normal component; QR of a zero matrix.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let b = random_point(&mut rng, 5, 2);
        let raw = random_matrix(&mut rng, 2, 2);
        let a = (&raw - raw.transpose()) * 0.5;
        let d = TangentVector::new(&b, b.matrix() * &a).unwrap();
        let bt = geodesic_step(&b, &d, 1.0).unwrap();
        let expected = b.matrix() * exp_skew(&a, 1.0).unwrap();
        assert!((bt.matrix() - expected).amax() < 1e-10);
    }

    #[test]
    fn vec_identity_and_transpose_permutation() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let k = random_matrix(&mut rng, 3, 4);
        let x = random_matrix(&mut rng, 4, 2);
        let c = random_matrix(&mut rng, 2, 5);
        let lhs = vec_of(&(&k * &x * &c));
        let rhs = c.transpose().kronecker(&k) * vec_of(&x);
        assert!((lhs - rhs).amax() < 1e-12);

        let p_mr = transpose_permutation(4, 2);
        let p_rm = transpose_permutation(2, 4);
        assert!((vec_of(&x.transpose()) - &p_mr * vec_of(&x)).amax() == 0.0);
        assert!((p_rm * p_mr - DMatrix::identity(8, 8)).amax() == 0.0);
    }

    /// Synthetic positive-definite second-derivative action with the same
    /// contract as the real objective: W(D) - B W(D)'B for symmetric W.
    fn synthetic_hessian(
        rng: &mut ChaCha12Rng,
        base: &StiefelPoint,
        strength: f64,
    ) -> impl Fn(&DMatrix<f64>) -> DMatrix<f64> + use<> {
        let (m, r) = (base.nrows(), base.ncols());
        let dim = m * r;
        let root = random_matrix(rng, dim, dim);
        let w = &root * root.transpose() + DMatrix::identity(dim, dim) * strength;
        let b = base.matrix().clone();
        move |d: &DMatrix<f64>| {
            let wd = unvec(&(&w * vec_of(d)), m, r);
            &wd - &b * (wd.transpose() * &b)
        }
    }

    #[test]
    fn newton_with_zero_projected_gradient_returns_zero() {
        // F = B S with S symmetric projects to a zero gradient.
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let b = random_point(&mut rng, 5, 2);
        let raw = random_matrix(&mut rng, 2, 2);
        let s = (&raw + raw.transpose()) * 0.5;
        let f = b.matrix() * s;
        let hess = synthetic_hessian(&mut rng, &b, 3.0);
        let delta = solve_newton_system(&b, &f, hess).unwrap();
        assert!(delta.sup_norm() < 1e-10);
    }

    #[test]
    fn newton_detects_rank_deficient_system() {
        let mut rng = ChaCha12Rng::seed_from_u64(10);
        let b = random_point(&mut rng, 5, 2);
        let f = DMatrix::zeros(5, 2);
        let result = solve_newton_system(&b, &f, |d: &DMatrix<f64>| DMatrix::zeros(d.nrows(), d.ncols()));
        assert!(matches!(result, Err(Error::SingularSystem(_))));
    }

    /// Dense oracle: stack the vectorized Newton equation on top of all r^2
    /// skewness constraints and solve the tall system by least squares.
    fn stacked_least_squares(
        base: &StiefelPoint,
        f: &DMatrix<f64>,
        hess: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    ) -> DMatrix<f64> {
        let b = base.matrix();
        let (m, r) = (base.nrows(), base.ncols());
        let dim = m * r;
        let pi = DMatrix::identity(m, m) - b * b.transpose();
        let bf = b.transpose() * f;

        let operator = |d: &DMatrix<f64>| {
            let skew1 = f.transpose() * d;
            let skew1 = (&skew1 - skew1.transpose()) * 0.5;
            let skew2 = d * f.transpose();
            let skew2 = (&skew2 - skew2.transpose()) * 0.5;
            hess(d) - b * skew1 - skew2 * b - (&pi * d * &bf) * 0.5
        };

        let mut stacked = DMatrix::zeros(dim + r * r, dim);
        let mut unit = DVector::zeros(dim);
        for j in 0..dim {
            unit[j] = 1.0;
            let d = unvec(&unit, m, r);
            unit[j] = 0.0;
            stacked
                .view_mut((0, j), (dim, 1))
                .copy_from(&vec_of(&operator(&d)));
            let constraint = b.transpose() * &d + d.transpose() * b;
            stacked
                .view_mut((dim, j), (r * r, 1))
                .copy_from(&vec_of(&constraint));
        }

        let g = f - b * (f.transpose() * b);
        let mut rhs = DVector::zeros(dim + r * r);
        rhs.view_mut((0, 0), (dim, 1)).copy_from(&(-vec_of(&g)));
        let sol = stacked.svd(true, true).solve(&rhs, 1e-12).unwrap();
        unvec(&sol.column(0).into_owned(), m, r)
    }

    #[test]
    fn newton_matches_stacked_least_squares_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let base = random_point(&mut rng, 4, 2);
        let f = random_matrix(&mut rng, 4, 2);
        let hess = synthetic_hessian(&mut rng, &base, 8.0);
        let delta = solve_newton_system(&base, &f, &hess).unwrap();
        let oracle = stacked_least_squares(&base, &f, &hess);
        assert!(
            (delta.values() - &oracle).amax() < 1e-8,
            "difference {:.3e}",
            (delta.values() - &oracle).amax()
        );
    }

    #[test]
    fn newton_residuals_small_across_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        for _ in 0..25 {
            let m = rng.random_range(2..=7);
            let r = rng.random_range(1..=m.min(4));
            let base = random_point(&mut rng, m, r);
            let f = random_matrix(&mut rng, m, r);
            let hess = synthetic_hessian(&mut rng, &base, 10.0);
            let system = NewtonSystem::build(&base, &f, &hess).unwrap();
            let delta = system.newton_step().unwrap();
            // Verify the matrix-form equation directly.
            let g = project_to_tangent(&base, &f).unwrap();
            let lhs = unvec(
                &(&system.vec_system().matrix * vec_of(delta.values())),
                m,
                r,
            );
            let residual = (lhs + g.values()).amax();
            assert!(residual <= 1e-8 * (1.0 + g.values().amax()));
            let skew = (base.matrix().transpose() * delta.values()
                + delta.values().transpose() * base.matrix())
            .amax();
            assert!(skew <= 1e-8);
        }
    }

    #[test]
    fn newton_solves_trivial_tangent_space() {
        let b = StiefelPoint::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let f = DMatrix::from_element(1, 1, 0.7);
        let delta = solve_newton_system(&b, &f, |d: &DMatrix<f64>| d.clone()).unwrap();
        assert_eq!(delta.values()[(0, 0)], 0.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn projection_lands_in_tangent_space(seed in 0u64..1000, m in 2usize..7, r in 1usize..4) {
            let r = r.min(m);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let b = random_point(&mut rng, m, r);
            let g = random_matrix(&mut rng, m, r);
            let d = project_to_tangent(&b, &g).unwrap();
            let a = b.matrix().transpose() * d.values();
            prop_assert!((a.clone() + a.transpose()).amax() < 1e-10);
        }

        #[test]
        fn exp_skew_is_orthogonal_with_inverse(seed in 0u64..1000, p in 1usize..7) {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let raw = random_matrix(&mut rng, p, p);
            let x = (&raw - raw.transpose()) * 0.5;
            let e = exp_skew(&x, 1.0).unwrap();
            prop_assert!((e.transpose() * &e - DMatrix::identity(p, p)).amax() < 1e-10);
            let back = exp_skew(&x, -1.0).unwrap();
            prop_assert!((e * back - DMatrix::identity(p, p)).amax() < 1e-9);
        }

        #[test]
        fn geodesics_stay_on_manifold(seed in 0u64..1000, m in 2usize..8, r in 1usize..5) {
            let r = r.min(m);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let b = random_point(&mut rng, m, r);
            let d = random_tangent(&mut rng, &b);
            for step in 1..=10 {
                let t = step as f64 / 10.0;
                let bt = geodesic_step(&b, &d, t).unwrap();
                let defect = (bt.matrix().transpose() * bt.matrix()
                    - DMatrix::identity(r, r))
                .amax();
                prop_assert!(defect <= 1e-8, "t = {t}: defect {defect:.3e}");
            }
        }

        #[test]
        fn canonical_inner_matches_naive_formula(seed in 0u64..1000, m in 2usize..7, r in 1usize..4) {
            let r = r.min(m);
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let b = random_point(&mut rng, m, r);
            let d1 = random_tangent(&mut rng, &b);
            let d2 = random_tangent(&mut rng, &b);
            let half_proj = DMatrix::identity(m, m) - b.matrix() * b.matrix().transpose() * 0.5;
            let naive = (d1.values().transpose() * half_proj * d2.values()).trace();
            prop_assert!((canonical_inner(&d1, &d2).unwrap() - naive).abs() < 1e-10);
        }
    }
}
