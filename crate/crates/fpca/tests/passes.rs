//! Exact accounting of likelihood passes. The counter is process-global, so
//! all exact-delta assertions live in this single test function: an
//! integration target runs in its own process, and one function cannot race
//! itself.

use fpca::basis::BasisSystem;
use fpca::data::{SparseDataset, Subject};
use fpca::likelihood::{Evaluation, build_caches, likelihood_passes, neg_loglik};
use fpca::optim::{FitOptions, fit};
use fpca::selection::approx_cv;
use fpca::stiefel::StiefelPoint;
use nalgebra::{DMatrix, DVector};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, StandardNormal};

fn normal(rng: &mut ChaCha12Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

#[test]
fn pass_counter_deltas_are_exact() {
    let mut rng = ChaCha12Rng::seed_from_u64(32);
    let basis = BasisSystem::new(4, 4).unwrap();
    let b = StiefelPoint::orthonormalized(DMatrix::from_fn(4, 2, |_, _| normal(&mut rng)))
        .unwrap();
    let lambda = [1.0f64, 0.4];
    let subjects: Vec<Subject> = (0..40)
        .map(|i| {
            let m = rng.random_range(3..=8);
            let times: Vec<f64> = (0..m).map(|_| rng.random_range(0.0..1.0)).collect();
            let design = basis.evaluate_design(&times).unwrap();
            let scores = DVector::from_fn(2, |k, _| lambda[k].sqrt() * normal(&mut rng));
            let mean = design.transpose() * b.matrix() * scores;
            let values: Vec<f64> = (0..m).map(|j| mean[j] + 0.25 * normal(&mut rng)).collect();
            Subject::new(format!("s{i}"), times, values).unwrap()
        })
        .collect();
    let data = SparseDataset::from_subjects(subjects).unwrap();
    let caches = build_caches(&basis, &data).unwrap();
    let init = fpca::init::initial_params(&data, &basis, 2).unwrap();

    let report = fit(&caches, &init, &FitOptions::default()).unwrap();
    assert!(report.converged, "{:?}", report.failure_reason);

    // A value-only call is one pass.
    let before = likelihood_passes();
    neg_loglik(&report.params, &caches).unwrap();
    assert_eq!(likelihood_passes() - before, 1);

    // A full derivative evaluation is still one pass.
    let before = likelihood_passes();
    Evaluation::new(&report.params, &caches).unwrap();
    assert_eq!(likelihood_passes() - before, 1);

    // The whole CV score costs exactly one pass: everything per-subject is
    // reused from that single evaluation.
    let before = likelihood_passes();
    approx_cv(&report, &caches).unwrap();
    assert_eq!(likelihood_passes() - before, 1);
}
