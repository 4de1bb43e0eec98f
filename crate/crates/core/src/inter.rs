//! Hyperspherical-energy inter-class regularization.
//!
//! The energy of a set of class centres is the mean, over classes, of the
//! summed squared positive cosines to every other centre. It is zero exactly
//! when no two centres point into the same half-space.

use crate::geometry::{dot, normalize_columns, ClassWeights};
use crate::losses::{convex_combination, LossResult};
use crate::{Error, Result};

/// Weight of the regularizer in the combined loss.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RegConfig {
    pub lambda_inter: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self { lambda_inter: 0.01 }
    }
}

impl RegConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda_inter) {
            return Err(Error::InvalidParameter(format!(
                "lambda_inter must be in [0, 1], got {}",
                self.lambda_inter
            )));
        }
        Ok(())
    }
}

/// `(1/C)·Σ_j Σ_{i≠j} max(0, cos φ_ij)²` over the normalised columns.
///
/// Terms are summed in sorted order, so the result does not depend on the
/// order of the columns.
pub fn sep_energy(w: &ClassWeights) -> Result<f64> {
    let wn = normalize_columns(w)?;
    let c = wn.classes();
    let mut terms = Vec::with_capacity(c * (c - 1));
    for j in 0..c {
        for i in 0..c {
            if i != j {
                let cos = dot(wn.column(i), wn.column(j)).max(0.0);
                terms.push(cos * cos);
            }
        }
    }
    terms.sort_by(f64::total_cmp);
    Ok(terms.iter().sum::<f64>() / c as f64)
}

/// `(1/C)·‖[WₙᵀWₙ]₊ − I‖²_F` with its gradient with respect to the raw `W`.
///
/// `grad_x` is empty: the regularizer does not touch the embeddings.
pub fn inter_loss(w: &ClassWeights) -> Result<LossResult> {
    let norms = w.nonzero_column_norms()?;
    let wn = normalize_columns(w)?;
    let (d, c) = (w.dim(), w.classes());

    // Gram matrix of the unit columns, clamped at zero.
    let mut gram = vec![0.0; c * c];
    for i in 0..c {
        for j in i..c {
            let g = dot(wn.column(i), wn.column(j)).max(0.0);
            gram[i * c + j] = g;
            gram[j * c + i] = g;
        }
    }
    let mut energy = 0.0;
    for i in 0..c {
        for j in 0..c {
            let target = if i == j { 1.0 } else { 0.0 };
            let e = gram[i * c + j] - target;
            energy += e * e;
        }
    }
    let value = energy / c as f64;

    // The diagonal is identically one, so only off-diagonal entries carry gradient.
    // dL/dŵ_k = (4/C)·Σ_{j≠k} [G_kj]₊ ŵ_j, then project out the radial part.
    let mut grad_w = vec![0.0; d * c];
    let scale = 4.0 / c as f64;
    for k in 0..c {
        let mut g_unit = vec![0.0; d];
        for j in (0..c).filter(|&j| j != k) {
            let g = gram[k * c + j];
            if g > 0.0 {
                for (acc, v) in g_unit.iter_mut().zip(wn.column(j)) {
                    *acc += scale * g * v;
                }
            }
        }
        let uk = wn.column(k);
        let radial = dot(&g_unit, uk);
        for t in 0..d {
            grad_w[k * d + t] = (g_unit[t] - radial * uk[t]) / norms[k];
        }
    }

    Ok(LossResult {
        value,
        grad_x: Vec::new(),
        grad_w,
    })
}

/// `(1 − λ)·L_a + λ·L_inter`.
pub fn combined_loss(la: &LossResult, li: &LossResult, cfg: &RegConfig) -> Result<LossResult> {
    cfg.validate()?;
    if la.grad_w.len() != li.grad_w.len() {
        return Err(Error::DimensionMismatch {
            expected: la.grad_w.len(),
            found: li.grad_w.len(),
        });
    }
    if !li.grad_x.is_empty() {
        if li.grad_x.len() != la.grad_x.len() {
            return Err(Error::DimensionMismatch {
                expected: la.grad_x.len(),
                found: li.grad_x.len(),
            });
        }
        if li.grad_x.iter().flatten().any(|&g| g != 0.0) {
            return Err(Error::InvalidParameter(
                "regularizer must not carry embedding gradients".into(),
            ));
        }
    }
    let li = LossResult {
        value: li.value,
        grad_x: Vec::new(),
        grad_w: li.grad_w.clone(),
    };
    Ok(convex_combination(la, &li, cfg.lambda_inter))
}
