//! Functional principal component analysis for sparse longitudinal data.
//!
//! Each subject contributes a handful of noisy measurements of a latent
//! random curve at irregular times. The latent covariance is modeled with a
//! fixed number of eigenfunctions expanded in an orthonormalized B-spline
//! basis; the coefficient matrix lives on a Stiefel manifold and all free
//! parameters are estimated jointly by Newton-Raphson on the exact restricted
//! likelihood. An approximate leave-one-curve-out score ranks candidate
//! models without refitting.

pub mod basis;
pub mod data;
pub mod error;
pub mod init;
pub mod likelihood;
pub mod optim;
mod reduce;
pub mod selection;
pub mod sim;
pub mod stiefel;

pub use error::{Error, Result};
