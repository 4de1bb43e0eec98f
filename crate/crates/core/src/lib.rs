//! Angular-margin embedding learning for speaker verification.
//!
//! The crate is organised bottom-up:
//!
//! - [`geometry`]: normalisation, cosine and angle primitives on the hypersphere.
//! - [`losses`]: softmax, modified softmax and the unified angular-margin loss
//!   (A-/AM-/AAM-softmax) with analytic gradients and annealing.
//! - [`inter`]: the hyperspherical-energy inter-class regularizer.
//! - [`data`]: deterministic synthetic speakers and the text file formats.
//! - [`trainer`]: a small mean-pooled frame encoder, PK batch sampling and SGD.
//! - [`eval`]: cosine trial scoring, EER, minDCF, DET and separability metrics.
//! - [`config`] / [`pipeline`]: the declarative run configuration and the
//!   stage functions behind the `spkembed` command line tool.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inter;
pub mod losses;
pub mod pipeline;
pub mod trainer;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use geometry::ClassWeights;
