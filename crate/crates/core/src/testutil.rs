//! Finite-difference oracle and random fixtures for unit tests.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::geometry::ClassWeights;
use crate::losses::Batch;

pub const FD_STEP: f64 = 1e-5;

pub fn random_weights(rng: &mut impl Rng, dim: usize, classes: usize) -> ClassWeights {
    let data = (0..dim * classes).map(|_| rng.sample(StandardNormal)).collect();
    ClassWeights::from_column_major(dim, classes, data).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let embeddings = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-1.5..1.5)).collect())
        .collect();
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(embeddings, labels).unwrap()
}

/// Central differences of `f` around `params`.
pub fn numeric_grad(params: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..p.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + FD_STEP;
            let plus = f(&p);
            p[i] = orig - FD_STEP;
            let minus = f(&p);
            p[i] = orig;
            (plus - minus) / (2.0 * FD_STEP)
        })
        .collect()
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], tol: f64) {
    assert_eq!(analytic.len(), numeric.len());
    for (k, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let err = relative_error(*a, *n);
        assert!(err < tol, "entry {k}: analytic {a} numeric {n} (rel err {err:e})");
    }
}
