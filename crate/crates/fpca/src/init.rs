//! Starting values for the fitter.
//!
//! The pipeline is classical: estimate the mean curve by local linear
//! smoothing of the pooled observations, center the data, smooth the
//! within-subject cross-products onto a covariance surface over a uniform
//! grid, project that surface onto the orthonormal basis, and take the top
//! eigenpairs. The result only has to land in the Newton basin, so a simple
//! product-kernel average replaces heavier surface smoothers.

use crate::basis::BasisSystem;
use crate::data::SparseDataset;
use crate::error::{Error, Result};
use crate::likelihood::ModelParams;
use crate::stiefel::StiefelPoint;
use nalgebra::{DMatrix, DVector};

/// Default number of grid points for the covariance surface and mean grid.
pub const DEFAULT_GRID: usize = 51;

/// Smallest admitted starting value for the noise variance, and the relative
/// floor applied to starting eigenvalues.
const SIGMA2_FLOOR: f64 = 1e-4;
const EIGENVALUE_REL_FLOOR: f64 = 1e-4;

fn gauss_kernel(z: f64) -> f64 {
    (-0.5 * z * z).exp()
}

/// Local linear fit at `t`; points of subject `exclude` are left out.
/// Falls back to the (local, then global) weighted mean when the design is
/// degenerate, so the result is always finite.
fn local_linear(points: &[(f64, f64, usize)], bandwidth: f64, t: f64, exclude: Option<usize>) -> f64 {
    let (mut s0, mut s1, mut s2, mut t0, mut t1) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let mut global_sum = 0.0;
    let mut global_n = 0.0;
    for &(ti, yi, subject) in points {
        global_sum += yi;
        global_n += 1.0;
        if exclude == Some(subject) {
            continue;
        }
        let d = ti - t;
        let w = gauss_kernel(d / bandwidth);
        s0 += w;
        s1 += w * d;
        s2 += w * d * d;
        t0 += w * yi;
        t1 += w * d * yi;
    }
    if s0 == 0.0 {
        return global_sum / global_n;
    }
    let denom = s0 * s2 - s1 * s1;
    if denom <= 1e-12 * (s0 * s2).abs() {
        return t0 / s0;
    }
    (s2 * t0 - s1 * t1) / denom
}

/// Mean curve estimate: pooled local linear smoother plus a sampled grid.
#[derive(Debug, Clone)]
pub struct MeanEstimate {
    points: Vec<(f64, f64, usize)>,
    bandwidth: f64,
    grid_values: Vec<f64>,
}

impl MeanEstimate {
    pub fn evaluate(&self, t: f64) -> f64 {
        local_linear(&self.points, self.bandwidth, t, None)
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Values on the uniform grid of [`DEFAULT_GRID`] points over [0, 1].
    pub fn grid_values(&self) -> &[f64] {
        &self.grid_values
    }
}

/// Estimates the mean curve from the pooled observations. With `bandwidths`
/// set to `None`, the bandwidth is chosen by leave-one-subject-out CV over a
/// geometric grid of 10 values spanning [range/20, range/2] of the pooled
/// time range.
pub fn estimate_mean(data: &SparseDataset, bandwidths: Option<&[f64]>) -> Result<MeanEstimate> {
    let mut points = Vec::with_capacity(data.total_observations());
    for (idx, s) in data.subjects().iter().enumerate() {
        for (&t, &y) in s.times().iter().zip(s.values()) {
            points.push((t, y, idx));
        }
    }
    if points.len() < 10 {
        return Err(Error::InsufficientData(format!(
            "mean estimation needs at least 10 pooled observations, found {}",
            points.len()
        )));
    }

    let candidates: Vec<f64> = match bandwidths {
        Some(hs) => {
            if hs.is_empty() || !hs.iter().all(|h| h.is_finite() && *h > 0.0) {
                return Err(Error::Domain("bandwidths must be positive and finite".into()));
            }
            hs.to_vec()
        }
        None => {
            let min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
            let max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
            let range = (max - min).max(1e-6);
            let (lo, hi) = (range / 20.0, range / 2.0);
            (0..10)
                .map(|k| lo * (hi / lo).powf(k as f64 / 9.0))
                .collect()
        }
    };

    let bandwidth = if candidates.len() == 1 {
        candidates[0]
    } else {
        let mut best = (f64::INFINITY, candidates[0]);
        for &h in &candidates {
            let mut score = 0.0;
            for &(t, y, subject) in &points {
                let fitted = local_linear(&points, h, t, Some(subject));
                score += (y - fitted) * (y - fitted);
            }
            if score < best.0 {
                best = (score, h);
            }
        }
        best.1
    };

    let grid_values = (0..DEFAULT_GRID)
        .map(|g| {
            let t = g as f64 / (DEFAULT_GRID - 1) as f64;
            local_linear(&points, bandwidth, t, None)
        })
        .collect();
    Ok(MeanEstimate {
        points,
        bandwidth,
        grid_values,
    })
}

/// Kernel-smoothed covariance surface on a uniform grid over [0, 1].
#[derive(Debug, Clone)]
pub struct CovarianceSurface {
    /// Uniform grid points.
    pub grid: Vec<f64>,
    /// Smoothed cross-products; symmetric.
    pub values: DMatrix<f64>,
    /// Smoothed squared responses at the grid: estimates diag + noise.
    pub diag_variance: DVector<f64>,
    pub bandwidth: f64,
}

/// Default covariance bandwidth: twice the grid spacing, shrunk slowly with
/// the number of subjects.
pub fn default_surface_bandwidth(grid_size: usize, num_subjects: usize) -> f64 {
    let spacing = 1.0 / (grid_size - 1) as f64;
    2.0 * spacing * (num_subjects as f64 / 100.0).powf(-1.0 / 6.0)
}

/// Smooths the mean-centered cross-products y_j y_j' (j != j' within a
/// subject) with a product Gaussian kernel. The input must already be
/// centered.
pub fn smooth_covariance(
    data: &SparseDataset,
    grid_size: usize,
    bandwidth: Option<f64>,
) -> Result<CovarianceSurface> {
    if grid_size < 3 || grid_size % 2 == 0 {
        return Err(Error::Domain(format!(
            "grid size must be odd and at least 3, got {grid_size}"
        )));
    }
    if !data.subjects().iter().any(|s| s.len() >= 2) {
        return Err(Error::InsufficientData(
            "covariance smoothing needs a subject with at least 2 measurements".into(),
        ));
    }
    let h = bandwidth.unwrap_or_else(|| default_surface_bandwidth(grid_size, data.num_subjects()));
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::Domain("bandwidth must be positive and finite".into()));
    }

    let g = grid_size;
    let grid: Vec<f64> = (0..g).map(|i| i as f64 / (g - 1) as f64).collect();

    // Pair sums via per-subject rank-one updates: for subject i with kernel
    // rows k_j and responses y_j,
    //   sum_{j != j'} (y_j k_j)(y_j' k_j')' = u u' - sum_j y_j^2 k_j k_j'
    // with u = sum_j y_j k_j, and likewise with y = 1 for the denominator.
    let mut num = DMatrix::zeros(g, g);
    let mut den = DMatrix::zeros(g, g);
    let mut var_num = DVector::zeros(g);
    let mut var_den = DVector::zeros(g);
    let mut kj = DVector::zeros(g);
    for s in data.subjects() {
        let mut u = DVector::zeros(g);
        let mut v = DVector::zeros(g);
        for (&t, &y) in s.times().iter().zip(s.values()) {
            for (row, &tg) in grid.iter().enumerate() {
                kj[row] = gauss_kernel((t - tg) / h);
            }
            var_num.axpy(y * y, &kj, 1.0);
            var_den.axpy(1.0, &kj, 1.0);
            if s.len() >= 2 {
                num.ger(-y * y, &kj, &kj, 1.0);
                den.ger(-1.0, &kj, &kj, 1.0);
                u.axpy(y, &kj, 1.0);
                v.axpy(1.0, &kj, 1.0);
            }
        }
        num.ger(1.0, &u, &u, 1.0);
        den.ger(1.0, &v, &v, 1.0);
    }

    let values = DMatrix::from_fn(g, g, |a, b| {
        if den[(a, b)] > 0.0 {
            num[(a, b)] / den[(a, b)]
        } else {
            0.0
        }
    });
    let values = (&values + values.transpose()) * 0.5;
    let diag_variance = DVector::from_fn(g, |a, _| {
        if var_den[a] > 0.0 {
            var_num[a] / var_den[a]
        } else {
            0.0
        }
    });
    Ok(CovarianceSurface {
        grid,
        values,
        diag_variance,
        bandwidth: h,
    })
}

/// Composite Simpson weights on a uniform grid with an odd point count.
pub(crate) fn simpson_weights(g: usize) -> DVector<f64> {
    let spacing = 1.0 / (g - 1) as f64;
    let mut w = DVector::zeros(g);
    for panel in 0..(g - 1) / 2 {
        let base = 2 * panel;
        w[base] += spacing / 3.0;
        w[base + 1] += 4.0 * spacing / 3.0;
        w[base + 2] += spacing / 3.0;
    }
    w
}

/// Projects a grid surface onto the orthonormal basis: K = A' W C W A with
/// A the basis design on the grid and W the Simpson quadrature weights.
pub fn project_onto_basis(surface: &CovarianceSurface, basis: &BasisSystem) -> Result<DMatrix<f64>> {
    let g = surface.grid.len();
    if surface.values.nrows() != g || surface.values.ncols() != g {
        return Err(Error::Dimension(format!(
            "surface is {}x{} for a grid of {} points",
            surface.values.nrows(),
            surface.values.ncols(),
            g
        )));
    }
    if g < 3 || g % 2 == 0 {
        return Err(Error::Domain(format!(
            "projection grid must be odd and at least 3, got {g}"
        )));
    }
    let design = basis.evaluate_design(&surface.grid)?;
    let w = simpson_weights(g);
    let weighted = DMatrix::from_fn(basis.num_basis(), g, |k, a| design[(k, a)] * w[a]);
    let k = &weighted * &surface.values * weighted.transpose();
    Ok((&k + k.transpose()) * 0.5)
}

/// Starting parameters from mean-centered data: smooth, project, take the
/// top-r eigenpairs, and floor the noise and eigenvalue scales.
pub fn initial_params(data: &SparseDataset, basis: &BasisSystem, r: usize) -> Result<ModelParams> {
    let m = basis.num_basis();
    if r == 0 || r > m {
        return Err(Error::Dimension(format!(
            "cannot initialize {r} components over {m} basis functions"
        )));
    }
    let surface = smooth_covariance(data, DEFAULT_GRID, None)?;
    let projected = project_onto_basis(&surface, basis)?;

    let eigen = projected.symmetric_eigen();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eigen.eigenvalues[b].total_cmp(&eigen.eigenvalues[a]));

    let mut frame = DMatrix::zeros(m, r);
    for (col, &idx) in order.iter().take(r).enumerate() {
        frame.set_column(col, &eigen.eigenvectors.column(idx));
    }
    let b0 = StiefelPoint::orthonormalized(frame)?;

    let top = eigen.eigenvalues[order[0]].max(1e-8);
    let floor = EIGENVALUE_REL_FLOOR * top;
    let zeta0 = DVector::from_iterator(
        r,
        order
            .iter()
            .take(r)
            .map(|&idx| f64::ln(eigen.eigenvalues[idx].max(floor))),
    );

    let g = surface.grid.len();
    let sigma2_raw = (0..g)
        .map(|a| surface.diag_variance[a] - surface.values[(a, a)])
        .sum::<f64>()
        / g as f64;
    let tau0 = f64::ln(sigma2_raw.max(SIGMA2_FLOOR));

    ModelParams::new(b0, zeta0, tau0)
}
