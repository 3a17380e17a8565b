//! Orthonormalized B-spline basis on [0, 1].
//!
//! All downstream estimation works with basis functions that are orthonormal
//! in L2[0, 1]. Raw B-splines on a clamped uniform knot vector are evaluated
//! with the Cox-de Boor recurrence, their Gram matrix is computed exactly with
//! per-interval Gauss-Legendre quadrature, and the Cholesky factor of the Gram
//! matrix supplies the orthonormalizing change of coordinates.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// B-spline basis with a cached orthonormalization and quadrature rule.
#[derive(Debug, Clone)]
pub struct BasisSystem {
    num_basis: usize,
    order: usize,
    knots: Vec<f64>,
    /// Lower-triangular transform W with psi(t) = W * phi_raw(t).
    ortho: DMatrix<f64>,
    quad_nodes: Vec<f64>,
    quad_weights: Vec<f64>,
}

/// Gauss-Legendre nodes and weights on [-1, 1].
///
/// Newton iteration on the Legendre recurrence; exact for polynomials of
/// degree 2n - 1.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for k in 0..n {
        let mut x = (std::f64::consts::PI * (k as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // P_n(x) and P'_n(x) by upward recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for j in 2..=n {
                let jf = j as f64;
                let p2 = ((2.0 * jf - 1.0) * x * p1 - (jf - 1.0) * p0) / jf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (p0 - x * p1) / (1.0 - x * x);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[k] = x;
        weights[k] = 2.0 / ((1.0 - x * x) * dp * dp);
    }
    (nodes, weights)
}

impl BasisSystem {
    /// Builds the orthonormalized basis with `num_basis` functions of the
    /// given spline order (4 = cubic).
    pub fn new(num_basis: usize, order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::InvalidBasis("spline order must be at least 1".into()));
        }
        if num_basis < order {
            return Err(Error::InvalidBasis(format!(
                "need at least as many basis functions as the order ({num_basis} < {order})"
            )));
        }

        // Clamped uniform knots: `order` copies of each endpoint, interior
        // knots equally spaced.
        let interior = num_basis - order;
        let mut knots = vec![0.0; order];
        for i in 1..=interior {
            knots.push(i as f64 / (interior + 1) as f64);
        }
        knots.extend(std::iter::repeat_n(1.0, order));

        // Per-interval Gauss-Legendre with order + 1 nodes: exact for the
        // piecewise-polynomial Gram integrand of degree 2(order - 1).
        let (gl_nodes, gl_weights) = gauss_legendre(order + 1);
        let mut quad_nodes = Vec::new();
        let mut quad_weights = Vec::new();
        for j in (order - 1)..num_basis {
            let (a, b) = (knots[j], knots[j + 1]);
            if b <= a {
                continue;
            }
            for (x, w) in gl_nodes.iter().zip(&gl_weights) {
                quad_nodes.push(0.5 * (b - a) * x + 0.5 * (a + b));
                quad_weights.push(0.5 * (b - a) * w);
            }
        }

        let mut system = Self {
            num_basis,
            order,
            knots,
            ortho: DMatrix::identity(num_basis, num_basis),
            quad_nodes,
            quad_weights,
        };

        let mut gram = DMatrix::zeros(num_basis, num_basis);
        for (t, w) in system.quad_nodes.iter().zip(&system.quad_weights) {
            let phi = system.raw_at(*t);
            gram.ger(*w, &phi, &phi, 1.0);
        }
        let gram = (&gram + gram.transpose()) * 0.5;
        let chol = gram
            .cholesky()
            .ok_or_else(|| Error::Indefinite("raw B-spline Gram matrix".into()))?;
        let lower = chol.l();
        let mut inv = DMatrix::identity(num_basis, num_basis);
        lower.solve_lower_triangular_mut(&mut inv);
        system.ortho = inv;
        Ok(system)
    }

    pub fn num_basis(&self) -> usize {
        self.num_basis
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    /// Quadrature nodes of the exact piecewise Gauss-Legendre rule.
    pub fn quad_nodes(&self) -> &[f64] {
        &self.quad_nodes
    }

    pub fn quad_weights(&self) -> &[f64] {
        &self.quad_weights
    }

    /// Raw (non-orthonormalized) B-spline values at `t` in [0, 1].
    fn raw_at(&self, t: f64) -> DVector<f64> {
        let p = self.order - 1;
        // Knot span: largest j in [p, num_basis - 1] with knots[j] <= t, so
        // the last interval is treated as closed at t = 1.
        let mut span = self.num_basis - 1;
        for j in p..self.num_basis {
            if self.knots[j] <= t && (j + 1 > self.num_basis - 1 || t < self.knots[j + 1]) {
                span = j;
                break;
            }
        }

        // Triangular Cox-de Boor recurrence over the `order` active functions.
        let mut vals = vec![0.0; self.order];
        let mut left = vec![0.0; self.order];
        let mut right = vec![0.0; self.order];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = t - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - t;
            let mut saved = 0.0;
            for r in 0..j {
                let temp = vals[r] / (right[r + 1] + left[j - r]);
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }

        let mut out = DVector::zeros(self.num_basis);
        for (r, v) in vals.iter().enumerate() {
            out[span - p + r] = *v;
        }
        out
    }

    /// Orthonormalized basis values at `t`.
    pub fn orthonormal_at(&self, t: f64) -> Result<DVector<f64>> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::Domain(format!("time {t} outside [0, 1]")));
        }
        Ok(&self.ortho * self.raw_at(t))
    }

    /// Design matrix of the orthonormalized basis: column j holds the basis
    /// values at `times[j]`.
    pub fn evaluate_design(&self, times: &[f64]) -> Result<DMatrix<f64>> {
        let mut design = DMatrix::zeros(self.num_basis, times.len());
        for (j, &t) in times.iter().enumerate() {
            design.set_column(j, &self.orthonormal_at(t)?);
        }
        Ok(design)
    }
}
