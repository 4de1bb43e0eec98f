//! Hypersphere primitives shared by the losses and the metrics.

use crate::{Error, Result};

/// Clamp applied to cosines before `acos`, keeping angle gradients finite.
pub const ARCCOS_EPS: f64 = 1e-7;

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

fn check_dims(u: &[f64], v: &[f64]) -> Result<()> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    Ok(())
}

/// Unit vector in the direction of `v`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::DegenerateVector);
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Cosine similarity, clipped into `[-1, 1]`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u, v)?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::DegenerateVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `acos` of a cosine after clamping it to `[-1 + ε, 1 - ε]`.
pub fn clamped_acos(c: f64) -> f64 {
    c.clamp(-1.0 + ARCCOS_EPS, 1.0 - ARCCOS_EPS).acos()
}

/// Angle between two nonzero vectors, in `[0, π]`.
pub fn angle(u: &[f64], v: &[f64]) -> Result<f64> {
    Ok(clamped_acos(cosine(u, v)?))
}

/// A `dim × classes` weight matrix whose columns are class centres.
///
/// Storage is column-major, so `as_slice()[j * dim..(j + 1) * dim]` is column `j`.
/// There is no bias term.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassWeights {
    dim: usize,
    classes: usize,
    data: Vec<f64>,
}

impl ClassWeights {
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self> {
        let classes = columns.len();
        if classes < 2 {
            return Err(Error::InvalidParameter(format!(
                "class weights need at least 2 columns, got {classes}"
            )));
        }
        let dim = columns[0].len();
        if dim == 0 {
            return Err(Error::InvalidParameter("embedding dimension is 0".into()));
        }
        let mut data = Vec::with_capacity(dim * classes);
        for col in columns {
            if col.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: col.len(),
                });
            }
            data.extend_from_slice(col);
        }
        Self::from_column_major(dim, classes, data)
    }

    pub fn from_column_major(dim: usize, classes: usize, data: Vec<f64>) -> Result<Self> {
        if classes < 2 || dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "class weights must be at least 1x2, got {dim}x{classes}"
            )));
        }
        if data.len() != dim * classes {
            return Err(Error::DimensionMismatch {
                expected: dim * classes,
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("class weights"));
        }
        Ok(Self { dim, classes, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn columns(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn column_norms(&self) -> Vec<f64> {
        self.columns().map(norm).collect()
    }

    /// Norms of every column, failing on the first zero column.
    pub(crate) fn nonzero_column_norms(&self) -> Result<Vec<f64>> {
        let norms = self.column_norms();
        if let Some(index) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::ZeroColumn { index });
        }
        Ok(norms)
    }
}

/// Copy of `w` with every column scaled to unit length.
pub fn normalize_columns(w: &ClassWeights) -> Result<ClassWeights> {
    let norms = w.nonzero_column_norms()?;
    let mut out = w.clone();
    for (col, n) in out.data.chunks_exact_mut(w.dim).zip(norms) {
        col.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}
