//! Shared oracles for the integration tests.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use spkembed::data::Utterance;
use spkembed::losses::Batch;
use spkembed::ClassWeights;

pub const FD_STEP: f64 = 1e-5;

/// Central differences of `f` at every coordinate of `at`.
pub fn central_diff(at: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut p = at.to_vec();
    let mut out = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let x = p[i];
        p[i] = x + FD_STEP;
        let hi = f(&p);
        p[i] = x - FD_STEP;
        let lo = f(&p);
        p[i] = x;
        out.push((hi - lo) / (2.0 * FD_STEP));
    }
    out
}

/// Largest entrywise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

pub fn gaussian(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn weights(rng: &mut impl Rng, d: usize, c: usize) -> ClassWeights {
    ClassWeights::from_column_major(d, c, gaussian(rng, d * c)).unwrap()
}

pub fn batch(rng: &mut impl Rng, n: usize, d: usize, c: usize) -> Batch {
    let xs = (0..n).map(|_| gaussian(rng, d)).collect();
    let ys = (0..n).map(|_| rng.random_range(0..c)).collect();
    Batch::new(xs, ys).unwrap()
}

pub fn utterance(rng: &mut impl Rng, frames: usize, d: usize) -> Utterance {
    Utterance {
        id: "u".into(),
        speaker_id: "s".into(),
        frames: (0..frames).map(|_| gaussian(rng, d)).collect(),
    }
}

/// Flattens per-sample embedding gradients.
pub fn flat(rows: &[Vec<f64>]) -> Vec<f64> {
    rows.iter().flatten().copied().collect()
}

pub fn rebatch(b: &Batch, flat_x: &[f64]) -> Batch {
    let d = b.embeddings[0].len();
    Batch::new(flat_x.chunks(d).map(<[f64]>::to_vec).collect(), b.labels.clone()).unwrap()
}
