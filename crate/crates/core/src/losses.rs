//! Softmax-family classification losses on the hypersphere.
//!
//! Every loss here returns its batch-mean value together with exact gradients
//! with respect to the embeddings and the (unnormalised) class weights.
//! The angular losses normalise the weight columns but never the embeddings,
//! so every logit is `‖x‖·g(cos θ)` for some target shaping function `g`.

use std::f64::consts::PI;

use crate::geometry::{clamped_acos, dot, norm, ClassWeights, ARCCOS_EPS};
use crate::{Error, Result};

/// Embeddings with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(embeddings: Vec<Vec<f64>>, labels: Vec<usize>) -> Result<Self> {
        if embeddings.is_empty() {
            return Err(Error::InsufficientData("empty batch".into()));
        }
        if embeddings.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: embeddings.len(),
                found: labels.len(),
            });
        }
        Ok(Self { embeddings, labels })
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    fn check(&self, w: &ClassWeights) -> Result<()> {
        if self.is_empty() || self.embeddings.len() != self.labels.len() {
            return Err(Error::InsufficientData("empty or ragged batch".into()));
        }
        for x in &self.embeddings {
            if x.len() != w.dim() {
                return Err(Error::DimensionMismatch {
                    expected: w.dim(),
                    found: x.len(),
                });
            }
        }
        if let Some(&label) = self.labels.iter().find(|&&l| l >= w.classes()) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: w.classes(),
            });
        }
        Ok(())
    }
}

/// Loss value with gradients.
///
/// `grad_w` uses the column-major layout of [`ClassWeights::as_slice`].
/// Losses that do not depend on the embeddings leave `grad_x` empty.
#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub grad_x: Vec<Vec<f64>>,
    pub grad_w: Vec<f64>,
}

/// The `(m1, m2, m3)` margin triple.
///
/// `m1` multiplies the target angle (A-softmax), `m2` is added to it
/// (AAM-softmax) and `m3` is subtracted from the target cosine (AM-softmax).
/// `(1, 0, 0)` is the modified softmax.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MarginConfig {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self::modified()
    }
}

/// The one active margin of a validated [`MarginConfig`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MarginVariant {
    None,
    Multiplicative(u32),
    AdditiveAngle(f64),
    AdditiveCosine(f64),
}

impl MarginConfig {
    pub fn modified() -> Self {
        Self {
            m1: 1.0,
            m2: 0.0,
            m3: 0.0,
        }
    }

    pub fn multiplicative(m1: f64) -> Self {
        Self { m1, ..Self::modified() }
    }

    pub fn additive_angle(m2: f64) -> Self {
        Self { m2, ..Self::modified() }
    }

    pub fn additive_cosine(m3: f64) -> Self {
        Self { m3, ..Self::modified() }
    }

    /// Checks the ranges and that at most one margin is active.
    pub fn variant(&self) -> Result<MarginVariant> {
        let Self { m1, m2, m3 } = *self;
        if !(m1 >= 1.0 && m1.is_finite()) {
            return Err(Error::InvalidMargin(format!("m1 must be >= 1, got {m1}")));
        }
        if !(0.0..PI / 2.0).contains(&m2) {
            return Err(Error::InvalidMargin(format!("m2 must be in [0, pi/2), got {m2}")));
        }
        if !(0.0..1.0).contains(&m3) {
            return Err(Error::InvalidMargin(format!("m3 must be in [0, 1), got {m3}")));
        }
        let active = usize::from(m1 > 1.0) + usize::from(m2 > 0.0) + usize::from(m3 > 0.0);
        if active > 1 {
            return Err(Error::InvalidMargin(format!(
                "combined margins are not supported (m1={m1}, m2={m2}, m3={m3})"
            )));
        }
        Ok(if m1 > 1.0 {
            MarginVariant::Multiplicative(Psi::new(m1)?.multiplier())
        } else if m2 > 0.0 {
            MarginVariant::AdditiveAngle(m2)
        } else if m3 > 0.0 {
            MarginVariant::AdditiveCosine(m3)
        } else {
            MarginVariant::None
        })
    }
}

/// Monotonically decreasing extension of `cos(m·θ)` to the whole of `[0, π]`.
///
/// On `[kπ/m, (k+1)π/m]` it is `(-1)^k·cos(m·θ) - 2k`, which is continuously
/// differentiable across the segment joints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Psi {
    m: u32,
}

impl Psi {
    pub fn new(m1: f64) -> Result<Self> {
        if m1.is_nan() || m1 < 1.0 || m1.fract() != 0.0 || m1 > u32::MAX as f64 {
            return Err(Error::InvalidMargin(format!(
                "multiplicative margin must be a positive integer, got {m1}"
            )));
        }
        Ok(Self { m: m1 as u32 })
    }

    pub fn multiplier(&self) -> u32 {
        self.m
    }

    fn segment(&self, theta: f64) -> (f64, f64) {
        let m = f64::from(self.m);
        let k = ((theta * m / PI).floor()).clamp(0.0, m - 1.0);
        let sign = if (k as u64).is_multiple_of(2) { 1.0 } else { -1.0 };
        (k, sign)
    }

    pub fn value(&self, theta: f64) -> f64 {
        let (k, sign) = self.segment(theta);
        sign * (f64::from(self.m) * theta).cos() - 2.0 * k
    }

    /// dψ/dθ.
    pub fn derivative(&self, theta: f64) -> f64 {
        let (_, sign) = self.segment(theta);
        let m = f64::from(self.m);
        -sign * m * (m * theta).sin()
    }
}

/// ψ(θ) for integer multiplier `m`.
pub fn psi(theta: f64, m: u32) -> f64 {
    Psi { m: m.max(1) }.value(theta)
}

/// `cos φ` on `[0, π]`, continued as `-2 - cos φ` beyond π so it keeps decreasing.
fn shifted_cos(phi: f64) -> (f64, f64) {
    if phi <= PI {
        (phi.cos(), -phi.sin())
    } else {
        (-2.0 - phi.cos(), phi.sin())
    }
}

/// dθ/dc for θ = clamped_acos(c); zero inside the clamp region.
fn dtheta_dcos(c: f64) -> f64 {
    if c > -1.0 + ARCCOS_EPS && c < 1.0 - ARCCOS_EPS {
        -1.0 / (1.0 - c * c).sqrt()
    } else {
        0.0
    }
}

/// How the target logit is built from `c = cos θ_y` and `r = ‖x‖`.
#[derive(Debug, Clone, Copy)]
enum TargetLogit {
    Plain,
    Margin(MarginVariant),
    /// A-softmax target blended with the plain logit by weight λ.
    Annealed {
        psi: Psi,
        lambda: f64,
    },
}

impl TargetLogit {
    /// Returns `(z, g, dg/dc)` with `z = r·g(c)`.
    fn eval(self, c: f64, r: f64) -> (f64, f64, f64) {
        match self {
            TargetLogit::Plain | TargetLogit::Margin(MarginVariant::None) => (r * c, c, 1.0),
            TargetLogit::Margin(MarginVariant::AdditiveCosine(m3)) => (r * c - m3 * r, c - m3, 1.0),
            TargetLogit::Margin(MarginVariant::AdditiveAngle(m2)) => {
                let theta = clamped_acos(c);
                let (g, dg) = shifted_cos(theta + m2);
                (r * g, g, dg * dtheta_dcos(c))
            }
            TargetLogit::Margin(MarginVariant::Multiplicative(m)) => {
                let psi = Psi { m };
                let theta = clamped_acos(c);
                let g = psi.value(theta);
                (r * g, g, psi.derivative(theta) * dtheta_dcos(c))
            }
            TargetLogit::Annealed { psi, lambda } => {
                let theta = clamped_acos(c);
                let g = (lambda * c + psi.value(theta)) / (1.0 + lambda);
                let dg = (lambda + psi.derivative(theta) * dtheta_dcos(c)) / (1.0 + lambda);
                ((lambda * r * c + r * psi.value(theta)) / (1.0 + lambda), g, dg)
            }
        }
    }
}

/// Numerically stable `log Σ exp(z)` and the softmax posteriors.
fn log_softmax(z: &[f64]) -> (f64, Vec<f64>) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let lse = max + sum.ln();
    (lse, exps.into_iter().map(|e| e / sum).collect())
}

/// Standard softmax cross-entropy with bias-free logits `w_jᵀx`.
pub fn softmax_ce(batch: &Batch, w: &ClassWeights) -> Result<LossResult> {
    batch.check(w)?;
    let (d, classes) = (w.dim(), w.classes());
    let inv_n = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grad_x = Vec::with_capacity(batch.len());
    let mut grad_w = vec![0.0; d * classes];

    for (x, &y) in batch.embeddings.iter().zip(&batch.labels) {
        let z: Vec<f64> = w.columns().map(|col| dot(col, x)).collect();
        let (lse, p) = log_softmax(&z);
        value += lse - z[y];

        let mut gx = vec![0.0; d];
        for (j, col) in w.columns().enumerate() {
            let delta = (p[j] - f64::from(u8::from(j == y))) * inv_n;
            for k in 0..d {
                gx[k] += delta * col[k];
                grad_w[j * d + k] += delta * x[k];
            }
        }
        grad_x.push(gx);
    }
    finish(value * inv_n, grad_x, grad_w)
}

fn finish(value: f64, grad_x: Vec<Vec<f64>>, grad_w: Vec<f64>) -> Result<LossResult> {
    if !value.is_finite() {
        return Err(Error::NonFinite("loss value"));
    }
    Ok(LossResult { value, grad_x, grad_w })
}

/// Softmax over `‖x‖·cos θ_j` logits with a shaped target logit.
fn margin_softmax(batch: &Batch, w: &ClassWeights, target: TargetLogit) -> Result<LossResult> {
    batch.check(w)?;
    let (d, classes) = (w.dim(), w.classes());
    let col_norms = w.nonzero_column_norms()?;
    let unit: Vec<Vec<f64>> = w
        .columns()
        .zip(&col_norms)
        .map(|(col, n)| col.iter().map(|v| v / n).collect())
        .collect();
    let inv_n = 1.0 / batch.len() as f64;
    let mut value = 0.0;
    let mut grad_x = Vec::with_capacity(batch.len());
    let mut grad_w = vec![0.0; d * classes];

    for (x, &y) in batch.embeddings.iter().zip(&batch.labels) {
        let r = norm(x);
        if r == 0.0 {
            return Err(Error::DegenerateVector);
        }
        let s: Vec<f64> = unit.iter().map(|u| dot(u, x)).collect();
        let c = (s[y] / r).clamp(-1.0, 1.0);
        let (zy, g, dg) = target.eval(c, r);
        let mut z = s.clone();
        z[y] = zy;
        let (lse, p) = log_softmax(&z);
        value += lse - zy;

        let mut gx = vec![0.0; d];
        for j in 0..classes {
            let u = &unit[j];
            let gw = &mut grad_w[j * d..(j + 1) * d];
            if j == y {
                let delta = (p[j] - 1.0) * inv_n;
                // dz/dx = g·x̂ + g'(ŵ - c·x̂), dz/dw = r·g'(x̂ - c·ŵ)/‖w‖
                let scale_w = delta * r * dg / col_norms[j];
                for k in 0..d {
                    let xh = x[k] / r;
                    gx[k] += delta * (g * xh + dg * (u[k] - c * xh));
                    gw[k] += scale_w * (xh - c * u[k]);
                }
            } else {
                let delta = p[j] * inv_n;
                let scale_w = delta / col_norms[j];
                for k in 0..d {
                    gx[k] += delta * u[k];
                    gw[k] += scale_w * (x[k] - s[j] * u[k]);
                }
            }
        }
        grad_x.push(gx);
    }
    finish(value * inv_n, grad_x, grad_w)
}

/// Softmax over `‖x‖·cos θ_j` with normalised weight columns and raw embeddings.
pub fn modified_softmax(batch: &Batch, w: &ClassWeights) -> Result<LossResult> {
    margin_softmax(batch, w, TargetLogit::Plain)
}

/// The unified angular-margin loss; exactly one margin may be active.
pub fn angular_loss(batch: &Batch, w: &ClassWeights, m: &MarginConfig) -> Result<LossResult> {
    let variant = m.variant()?;
    margin_softmax(batch, w, TargetLogit::Margin(variant))
}

/// A-softmax with the target logit replaced by its λ-weighted blend with the
/// plain logit (see [`asoftmax_annealed_logit`]).
pub fn annealed_asoftmax_loss(batch: &Batch, w: &ClassWeights, m1: f64, lambda_a: f64) -> Result<LossResult> {
    if !(lambda_a >= 0.0 && lambda_a.is_finite()) {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda_a}")));
    }
    let psi = Psi::new(m1)?;
    margin_softmax(batch, w, TargetLogit::Annealed { psi, lambda: lambda_a })
}

/// The target logit of [`angular_loss`] for a single embedding.
pub fn target_logit(x: &[f64], w_target: &[f64], m: &MarginConfig) -> Result<f64> {
    let variant = m.variant()?;
    let (r, c) = radius_and_cosine(x, w_target)?;
    Ok(TargetLogit::Margin(variant).eval(c, r).0)
}

fn radius_and_cosine(x: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let r = norm(x);
    Ok((r, crate::geometry::cosine(x, w)?))
}

/// `(λ·‖x‖cos θ + ‖x‖ψ(θ)) / (1 + λ)` for the target class.
pub fn asoftmax_annealed_logit(x: &[f64], w_target: &[f64], m1: u32, lambda_a: f64) -> Result<f64> {
    if lambda_a.is_nan() || lambda_a < 0.0 {
        return Err(Error::InvalidParameter(format!("lambda must be >= 0, got {lambda_a}")));
    }
    let (r, c) = radius_and_cosine(x, w_target)?;
    let psi = Psi { m: m1.max(1) };
    Ok(TargetLogit::Annealed { psi, lambda: lambda_a }.eval(c, r).0)
}

/// `(1 - λ')·L_modified + λ'·L_angular`, gradients combined the same way.
pub fn blended_loss(batch: &Batch, w: &ClassWeights, m: &MarginConfig, lambda_blend: f64) -> Result<LossResult> {
    if !(0.0..=1.0).contains(&lambda_blend) {
        return Err(Error::InvalidParameter(format!(
            "blend weight must be in [0, 1], got {lambda_blend}"
        )));
    }
    let easy = modified_softmax(batch, w)?;
    let hard = angular_loss(batch, w, m)?;
    Ok(convex_combination(&easy, &hard, lambda_blend))
}

/// `(1 - t)·a + t·b` for values and both gradients; `grad_x` of an operand may be empty.
pub(crate) fn convex_combination(a: &LossResult, b: &LossResult, t: f64) -> LossResult {
    let mix = |p: f64, q: f64| (1.0 - t) * p + t * q;
    let grad_x = match (a.grad_x.is_empty(), b.grad_x.is_empty()) {
        (false, false) => a
            .grad_x
            .iter()
            .zip(&b.grad_x)
            .map(|(ga, gb)| ga.iter().zip(gb).map(|(&p, &q)| mix(p, q)).collect())
            .collect(),
        (false, true) => a
            .grad_x
            .iter()
            .map(|ga| ga.iter().map(|&p| mix(p, 0.0)).collect())
            .collect(),
        (true, false) => b
            .grad_x
            .iter()
            .map(|gb| gb.iter().map(|&q| mix(0.0, q)).collect())
            .collect(),
        (true, true) => Vec::new(),
    };
    LossResult {
        value: mix(a.value, b.value),
        grad_x,
        grad_w: a.grad_w.iter().zip(&b.grad_w).map(|(&p, &q)| mix(p, q)).collect(),
    }
}

/// Parameters of both annealing mechanisms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealConfig {
    /// Starting λ of the A-softmax logit blend.
    pub lambda_base: f64,
    /// Floor for λ.
    pub lambda_min: f64,
    /// Hyperbolic decay rate of λ per step.
    pub gamma: f64,
    /// Steps over which the loss blend λ' ramps from 0 to 1; 0 disables the ramp.
    pub ramp_steps: usize,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self {
            lambda_base: 1000.0,
            lambda_min: 5.0,
            gamma: 1e-4,
            ramp_steps: 0,
        }
    }
}

impl AnnealConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda_min >= 0.0
            && self.lambda_base >= self.lambda_min
            && self.lambda_base.is_finite()
            && self.gamma >= 0.0
            && self.gamma.is_finite();
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "anneal config requires 0 <= lambda_min <= lambda_base and gamma >= 0: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnealState {
    pub lambda_a: f64,
    pub lambda_blend: f64,
    pub step: usize,
}

/// λ(step) = max(λ_min, λ_base / (1 + γ·step)); λ'(step) = min(1, step / ramp_steps).
pub fn anneal_schedule(step: usize, cfg: &AnnealConfig) -> AnnealState {
    let t = step as f64;
    let lambda_a = (cfg.lambda_base / (1.0 + cfg.gamma * t)).max(cfg.lambda_min);
    let lambda_blend = if cfg.ramp_steps == 0 {
        1.0
    } else {
        (t / cfg.ramp_steps as f64).min(1.0)
    };
    AnnealState {
        lambda_a,
        lambda_blend,
        step,
    }
}
