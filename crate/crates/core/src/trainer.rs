//! Frame encoder, PK batch sampling, SGD and the training loop.
//!
//! The encoder maps every frame through `tanh` affine layers, averages the
//! last hidden layer over frames and applies an affine head. Frames are put in
//! a canonical order before pooling so the embedding is bitwise invariant to
//! frame permutations.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, EmbeddingSet, Utterance};
use crate::geometry::{normalize_columns, ClassWeights};
use crate::inter::{combined_loss, inter_loss, sep_energy, RegConfig};
use crate::losses::{
    angular_loss, anneal_schedule, annealed_asoftmax_loss, blended_loss, modified_softmax, softmax_ce, AnnealConfig,
    AnnealState, Batch, LossResult, MarginConfig, MarginVariant,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
}

impl EncoderShape {
    /// `(fan_in, fan_out)` of every affine layer, head last.
    fn layers(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_dim];
        dims.extend(&self.hidden);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|(i, o)| o * (i + 1)).sum()
    }

    fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::InvalidParameter(format!("degenerate encoder shape {self:?}")));
        }
        Ok(())
    }
}

/// Encoder parameters in one flat buffer: per layer a row-major
/// `fan_out × fan_in` weight block followed by `fan_out` biases.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    shape: EncoderShape,
    data: Vec<f64>,
}

/// Per-frame activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Forward {
    /// `acts[l][t]` is the output of hidden layer `l` on frame `t`; `acts[0]` holds the inputs.
    acts: Vec<Vec<Vec<f64>>>,
    pooled: Vec<f64>,
    pub embedding: Vec<f64>,
}

impl EncoderParams {
    pub fn from_data(shape: EncoderShape, data: Vec<f64>) -> Result<Self> {
        shape.validate()?;
        if data.len() != shape.param_count() {
            return Err(Error::DimensionMismatch {
                expected: shape.param_count(),
                found: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder parameters"));
        }
        Ok(Self { shape, data })
    }

    /// Gaussian init with std `1/√fan_in` for hidden layers and
    /// `head_scale/√fan_in` for the head.
    pub fn init(shape: EncoderShape, head_scale: f64, rng: &mut impl Rng) -> Result<Self> {
        shape.validate()?;
        let layers = shape.layers();
        let mut data = Vec::with_capacity(shape.param_count());
        for (l, &(fan_in, fan_out)) in layers.iter().enumerate() {
            let scale = if l + 1 == layers.len() { head_scale } else { 1.0 };
            let std = scale / (fan_in as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                let z: f64 = rng.sample(StandardNormal);
                data.push(std * z);
            }
            data.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> &EncoderShape {
        &self.shape
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `(offset, fan_in, fan_out)` of every layer.
    fn offsets(&self) -> Vec<(usize, usize, usize)> {
        let mut off = 0;
        self.shape
            .layers()
            .into_iter()
            .map(|(i, o)| {
                let r = (off, i, o);
                off += o * (i + 1);
                r
            })
            .collect()
    }

    fn affine(&self, (off, fan_in, fan_out): (usize, usize, usize), x: &[f64]) -> Vec<f64> {
        let w = &self.data[off..off + fan_in * fan_out];
        let b = &self.data[off + fan_in * fan_out..off + fan_out * (fan_in + 1)];
        (0..fan_out)
            .map(|o| {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b[o]
            })
            .collect()
    }

    pub fn forward(&self, utt: &Utterance) -> Result<Forward> {
        if utt.frames.is_empty() {
            return Err(Error::InsufficientData(format!("utterance {} has no frames", utt.id)));
        }
        let mut frames: Vec<&Vec<f64>> = utt.frames.iter().collect();
        for f in &frames {
            if f.len() != self.shape.input_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.shape.input_dim,
                    found: f.len(),
                });
            }
        }
        frames.sort_by(|a, b| lexicographic(a, b));

        let offsets = self.offsets();
        let (head, hidden) = offsets.split_last().expect("at least one layer");
        let mut acts = vec![frames.into_iter().cloned().collect::<Vec<_>>()];
        for &layer in hidden {
            let next = acts
                .last()
                .unwrap()
                .iter()
                .map(|x| self.affine(layer, x).into_iter().map(f64::tanh).collect())
                .collect();
            acts.push(next);
        }
        let last = acts.last().unwrap();
        let t = last.len() as f64;
        let mut pooled = vec![0.0; last[0].len()];
        for a in last {
            for (p, v) in pooled.iter_mut().zip(a) {
                *p += v;
            }
        }
        pooled.iter_mut().for_each(|p| *p /= t);
        let embedding = self.affine(*head, &pooled);
        Ok(Forward {
            acts,
            pooled,
            embedding,
        })
    }

    /// Adds the parameter gradient for `d loss / d embedding = grad_out` into `grad`.
    pub fn backward(&self, fwd: &Forward, grad_out: &[f64], grad: &mut [f64]) {
        let offsets = self.offsets();
        let (&(hoff, hin, hout), hidden) = offsets.split_last().expect("at least one layer");

        let hw = &self.data[hoff..hoff + hin * hout];
        let mut g_pooled = vec![0.0; hin];
        for o in 0..hout {
            let g = grad_out[o];
            for i in 0..hin {
                grad[hoff + o * hin + i] += g * fwd.pooled[i];
                g_pooled[i] += hw[o * hin + i] * g;
            }
            grad[hoff + hin * hout + o] += g;
        }
        if hidden.is_empty() {
            return;
        }

        let t = fwd.acts[0].len() as f64;
        for frame in 0..fwd.acts[0].len() {
            let mut g_act: Vec<f64> = g_pooled.iter().map(|g| g / t).collect();
            for (l, &(off, fan_in, fan_out)) in hidden.iter().enumerate().rev() {
                let out = &fwd.acts[l + 1][frame];
                let input = &fwd.acts[l][frame];
                let g_pre: Vec<f64> = g_act.iter().zip(out).map(|(g, a)| g * (1.0 - a * a)).collect();
                let w = &self.data[off..off + fan_in * fan_out];
                let mut g_in = vec![0.0; fan_in];
                for o in 0..fan_out {
                    let g = g_pre[o];
                    for i in 0..fan_in {
                        grad[off + o * fan_in + i] += g * input[i];
                        g_in[i] += w[o * fan_in + i] * g;
                    }
                    grad[off + fan_in * fan_out + o] += g;
                }
                g_act = g_in;
            }
        }
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Mean-pooled embedding of one utterance.
pub fn encode(utt: &Utterance, params: &EncoderParams) -> Result<Vec<f64>> {
    Ok(params.forward(utt)?.embedding)
}

/// One epoch of batches, each with `p` distinct speakers and `k` utterances per speaker.
///
/// Returns utterance indices into `dataset.utterances`. Only speakers with at
/// least `k` utterances are sampled; an epoch holds
/// `max(1, eligible utterances / (p·k))` batches.
pub fn balanced_batches(dataset: &Dataset, p: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if p == 0 || k == 0 {
        return Err(Error::InvalidParameter(format!("batch shape {p}x{k} is empty")));
    }
    let mut by_speaker: std::collections::BTreeMap<&str, Vec<usize>> = Default::default();
    for (i, u) in dataset.utterances.iter().enumerate() {
        by_speaker.entry(u.speaker_id.as_str()).or_default().push(i);
    }
    let eligible: Vec<&Vec<usize>> = by_speaker.values().filter(|v| v.len() >= k).collect();
    if eligible.len() < p {
        return Err(Error::InsufficientData(format!(
            "{} speakers have >= {k} utterances, batches need {p}",
            eligible.len()
        )));
    }
    let usable: usize = eligible.iter().map(|v| v.len()).sum();
    let n_batches = (usable / (p * k)).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let batches = (0..n_batches)
        .map(|_| {
            let mut batch = Vec::with_capacity(p * k);
            for s in index::sample(&mut rng, eligible.len(), p) {
                let utts = eligible[s];
                batch.extend(index::sample(&mut rng, utts.len(), k).into_iter().map(|u| utts[u]));
            }
            batch
        })
        .collect();
    Ok(batches)
}

/// Heavy-ball SGD: `v ← μ·v + g; θ ← θ − lr·v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::DimensionMismatch {
            expected: params.len(),
            found: grads.len().min(velocity.len()),
        });
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradients"));
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// Plain softmax cross-entropy on unnormalised logits.
    Softmax,
    /// Angular family selected by the margin triple; `(1, 0, 0)` is modified softmax.
    Angular,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    /// Epochs at which the learning rate is divided by 10. Empty means 50% and 75% of `epochs`.
    pub milestones: Vec<usize>,
    pub momentum: f64,
    /// Speakers per batch (P).
    pub classes_per_batch: usize,
    /// Utterances per speaker in a batch (K).
    pub utts_per_class: usize,
    pub loss: LossKind,
    pub margins: MarginConfig,
    pub reg: RegConfig,
    /// λ schedule of the A-softmax logit blend; its `ramp_steps` is ignored.
    pub anneal: AnnealConfig,
    /// Length of the λ' ramp for AM/AAM-softmax, in epochs; 0 disables the ramp.
    pub ramp_epochs: f64,
    /// Standard-deviation factor of the head initialisation.
    pub head_init_scale: f64,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embedding_dim: 512,
            epochs: 20,
            lr_init: 0.1,
            lr_final: 0.001,
            milestones: Vec::new(),
            momentum: 0.9,
            classes_per_batch: 8,
            utts_per_class: 4,
            loss: LossKind::Angular,
            margins: MarginConfig::modified(),
            reg: RegConfig { lambda_inter: 0.0 },
            anneal: AnnealConfig::default(),
            ramp_epochs: 5.0,
            head_init_scale: 0.1,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn effective_milestones(&self) -> Vec<usize> {
        if self.milestones.is_empty() {
            let mut m = vec![self.epochs / 2, self.epochs * 3 / 4];
            m.dedup();
            m
        } else {
            self.milestones.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::InvalidParameter(format!("training config: {m}")));
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return err(format!(
                "need lr_init > lr_final > 0, got {} and {}",
                self.lr_init, self.lr_final
            ));
        }
        if self.classes_per_batch * self.utts_per_class < 2 {
            return err("batches need at least 2 utterances".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("milestones {:?} are not strictly increasing", self.milestones));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.ramp_epochs >= 0.0 && self.ramp_epochs.is_finite()) {
            return err("ramp_epochs must be >= 0".into());
        }
        if self.embedding_dim == 0 {
            return err("embedding_dim must be positive".into());
        }
        self.margins.variant()?;
        self.reg.validate()?;
        self.anneal.validate()
    }

    fn margin_variant(&self) -> Result<MarginVariant> {
        self.margins.variant()
    }
}

/// Step learning rate: `lr_init / 10^(milestones passed)`, floored at `lr_final`.
pub fn lr_schedule(epoch: usize, cfg: &TrainingConfig) -> f64 {
    let passed = cfg.effective_milestones().iter().filter(|&&m| m <= epoch).count();
    (cfg.lr_init / 10f64.powi(passed as i32)).max(cfg.lr_final)
}

/// The per-step objective: (annealed) classification loss plus regularizer.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub loss: LossKind,
    pub margins: MarginConfig,
    pub reg: RegConfig,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub value: f64,
    pub grad_params: Vec<f64>,
    pub grad_w: Vec<f64>,
}

impl Objective {
    pub fn from_config(cfg: &TrainingConfig) -> Self {
        Self {
            loss: cfg.loss,
            margins: cfg.margins,
            reg: cfg.reg,
        }
    }

    /// `(λ, λ')` that this objective actually applies at `state`.
    pub fn applied_lambdas(&self, state: &AnnealState) -> Result<(f64, f64)> {
        Ok(match (self.loss, self.margins.variant()?) {
            (LossKind::Angular, MarginVariant::Multiplicative(_)) => (state.lambda_a, 0.0),
            (LossKind::Angular, MarginVariant::AdditiveAngle(_) | MarginVariant::AdditiveCosine(_)) => {
                (0.0, state.lambda_blend)
            }
            _ => (0.0, 0.0),
        })
    }

    pub fn loss_on_embeddings(&self, batch: &Batch, w: &ClassWeights, state: &AnnealState) -> Result<LossResult> {
        let la = match (self.loss, self.margins.variant()?) {
            (LossKind::Softmax, _) => softmax_ce(batch, w)?,
            (LossKind::Angular, MarginVariant::None) => modified_softmax(batch, w)?,
            (LossKind::Angular, MarginVariant::Multiplicative(_)) => {
                if state.lambda_a == 0.0 {
                    angular_loss(batch, w, &self.margins)?
                } else {
                    annealed_asoftmax_loss(batch, w, self.margins.m1, state.lambda_a)?
                }
            }
            (LossKind::Angular, _) => blended_loss(batch, w, &self.margins, state.lambda_blend)?,
        };
        if self.reg.lambda_inter > 0.0 {
            combined_loss(&la, &inter_loss(w)?, &self.reg)
        } else {
            Ok(la)
        }
    }

    /// Loss and gradients of one batch of utterances with respect to the
    /// encoder parameters and the class weights.
    pub fn evaluate(
        &self,
        params: &EncoderParams,
        w: &ClassWeights,
        utts: &[&Utterance],
        labels: &[usize],
        state: &AnnealState,
    ) -> Result<StepResult> {
        let forwards = utts.iter().map(|u| params.forward(u)).collect::<Result<Vec<_>>>()?;
        let batch = Batch::new(forwards.iter().map(|f| f.embedding.clone()).collect(), labels.to_vec())?;
        let loss = self.loss_on_embeddings(&batch, w, state)?;
        let mut grad_params = vec![0.0; params.as_slice().len()];
        for (fwd, gx) in forwards.iter().zip(&loss.grad_x) {
            params.backward(fwd, gx, &mut grad_params);
        }
        Ok(StepResult {
            value: loss.value,
            grad_params,
            grad_w: loss.grad_w,
        })
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean total loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    pub lambda: f64,
    pub lambda_blend: f64,
    pub sep_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub weights: ClassWeights,
    /// Speaker id of every weight column.
    pub classes: Vec<String>,
    pub log: Vec<EpochRecord>,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

pub fn init_model(dataset: &Dataset, cfg: &TrainingConfig) -> Result<(EncoderParams, ClassWeights, Vec<String>)> {
    let classes = dataset.speakers();
    if classes.len() < 2 {
        return Err(Error::InsufficientData("training needs at least 2 speakers".into()));
    }
    let input_dim = dataset
        .utterances
        .first()
        .and_then(|u| u.frames.first())
        .map(Vec::len)
        .ok_or_else(|| Error::InsufficientData("empty dataset".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let shape = EncoderShape {
        input_dim,
        hidden: cfg.hidden.clone(),
        output_dim: cfg.embedding_dim,
    };
    let params = EncoderParams::init(shape, cfg.head_init_scale, &mut rng)?;
    let raw: Vec<f64> = (0..cfg.embedding_dim * classes.len())
        .map(|_| rng.sample(StandardNormal))
        .collect();
    let w = normalize_columns(&ClassWeights::from_column_major(cfg.embedding_dim, classes.len(), raw)?)?;
    Ok((params, w, classes))
}

/// Trains encoder and class weights on `dataset`; deterministic in `cfg.seed`.
pub fn train(dataset: &Dataset, cfg: &TrainingConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (mut params, mut w, classes) = init_model(dataset, cfg)?;
    let class_of: std::collections::HashMap<&str, usize> =
        classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let labels: Vec<usize> = dataset
        .utterances
        .iter()
        .map(|u| class_of[u.speaker_id.as_str()])
        .collect();
    let objective = Objective::from_config(cfg);
    cfg.margin_variant()?;

    let mut log = Vec::with_capacity(cfg.epochs);
    let mut vel_params = vec![0.0; params.as_slice().len()];
    let mut vel_w = vec![0.0; w.as_slice().len()];
    let mut step = 0usize;
    let mut anneal = cfg.anneal;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let batches = balanced_batches(
            dataset,
            cfg.classes_per_batch,
            cfg.utts_per_class,
            epoch_seed(cfg.seed, epoch),
        )?;
        if epoch == 0 {
            anneal.ramp_steps = (cfg.ramp_epochs * batches.len() as f64).ceil() as usize;
        }
        let mut total = 0.0;
        let mut state = anneal_schedule(step, &anneal);
        for batch in &batches {
            state = anneal_schedule(step, &anneal);
            let utts: Vec<&Utterance> = batch.iter().map(|&i| &dataset.utterances[i]).collect();
            let y: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let diverged = || Error::Diverged {
                epoch,
                step,
                log: log.clone(),
            };
            let res = match objective.evaluate(&params, &w, &utts, &y, &state) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => return Err(diverged()),
                Err(e) => return Err(e),
            };
            if !res.value.is_finite() {
                return Err(diverged());
            }
            sgd_step(
                params.as_mut_slice(),
                &res.grad_params,
                lr,
                cfg.momentum,
                &mut vel_params,
            )
            .map_err(|_| diverged())?;
            sgd_step(w.as_mut_slice(), &res.grad_w, lr, cfg.momentum, &mut vel_w).map_err(|_| diverged())?;
            if params.as_slice().iter().chain(w.as_slice()).any(|v| !v.is_finite()) {
                return Err(diverged());
            }
            total += res.value;
            step += 1;
        }
        let (lambda, lambda_blend) = objective.applied_lambdas(&state)?;
        let sep = match sep_energy(&w) {
            Ok(s) => s,
            Err(_) => return Err(Error::Diverged { epoch, step, log }),
        };
        log.push(EpochRecord {
            epoch,
            loss: total / batches.len() as f64,
            lr,
            lambda,
            lambda_blend,
            sep_energy: sep,
        });
    }
    Ok(TrainOutcome {
        params,
        weights: w,
        classes,
        log,
    })
}

/// One embedding per utterance, in dataset order.
pub fn extract_embeddings(dataset: &Dataset, params: &EncoderParams) -> Result<EmbeddingSet> {
    let entries = dataset
        .utterances
        .iter()
        .map(|u| Ok((u.id.clone(), encode(u, params)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(EmbeddingSet {
        dim: params.shape.output_dim,
        entries,
    })
}

// ---------------------------------------------------------------------------
// Files

pub fn format_log(log: &[EpochRecord]) -> String {
    let mut out = String::from("# epoch loss lr lambda lambda_blend sep_energy\n");
    for r in log {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {}",
            r.epoch, r.loss, r.lr, r.lambda, r.lambda_blend, r.sep_energy
        );
    }
    out
}

fn join(values: &[f64]) -> String {
    values.iter().map(f64::to_string).collect::<Vec<_>>().join(" ")
}

pub fn format_encoder(params: &EncoderParams) -> String {
    let s = &params.shape;
    let hidden = s.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
    let mut out = format!(
        "#spkembed-encoder input_dim={} hidden={} output_dim={}\n",
        s.input_dim, hidden, s.output_dim
    );
    for (off, fan_in, fan_out) in params.offsets() {
        for o in 0..fan_out {
            let row = &params.data[off + o * fan_in..off + (o + 1) * fan_in];
            out.push_str(&join(row));
            out.push('\n');
        }
        out.push_str(&join(
            &params.data[off + fan_in * fan_out..off + fan_out * (fan_in + 1)],
        ));
        out.push('\n');
    }
    out
}

fn header_fields<'a>(line: &'a str, tag: &str, source: &str) -> Result<std::collections::HashMap<&'a str, &'a str>> {
    let mut toks = line.split_whitespace();
    if toks.next() != Some(tag) {
        return Err(Error::parse(source, 1, format!("missing `{tag}` header")));
    }
    toks.map(|t| {
        t.split_once('=')
            .ok_or_else(|| Error::parse(source, 1, format!("bad header field `{t}`")))
    })
    .collect()
}

fn header_usize(fields: &std::collections::HashMap<&str, &str>, key: &str, source: &str) -> Result<usize> {
    fields
        .get(key)
        .ok_or_else(|| Error::parse(source, 1, format!("header lacks `{key}`")))?
        .parse()
        .map_err(|_| Error::parse(source, 1, format!("bad `{key}`")))
}

fn parse_row(line: &str, expect: usize, source: &str, ln: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = line
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(source, ln, format!("invalid number `{t}`")))
        })
        .collect::<Result<_>>()?;
    if v.len() != expect {
        return Err(Error::parse(
            source,
            ln,
            format!("expected {expect} values, found {}", v.len()),
        ));
    }
    Ok(v)
}

pub fn parse_encoder(text: &str, source: &str) -> Result<EncoderParams> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "empty encoder file"))?;
    let f = header_fields(header, "#spkembed-encoder", source)?;
    let hidden_field = f.get("hidden").copied().unwrap_or("");
    let hidden = if hidden_field.is_empty() {
        Vec::new()
    } else {
        hidden_field
            .split(',')
            .map(|h| {
                h.parse()
                    .map_err(|_| Error::parse(source, 1, format!("bad hidden width `{h}`")))
            })
            .collect::<Result<_>>()?
    };
    let shape = EncoderShape {
        input_dim: header_usize(&f, "input_dim", source)?,
        hidden,
        output_dim: header_usize(&f, "output_dim", source)?,
    };
    shape.validate()?;
    let mut lines = lines.filter(|(_, l)| !l.is_empty());
    let mut data = Vec::with_capacity(shape.param_count());
    for (fan_in, fan_out) in shape.layers() {
        for _ in 0..fan_out {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, "truncated encoder file"))?;
            data.extend(parse_row(l, fan_in, source, ln)?);
        }
        let (ln, l) = lines
            .next()
            .ok_or_else(|| Error::parse(source, 0, "truncated encoder file"))?;
        data.extend(parse_row(l, fan_out, source, ln)?);
    }
    if let Some((ln, _)) = lines.next() {
        return Err(Error::parse(source, ln, "trailing data after last layer"));
    }
    EncoderParams::from_data(shape, data)
}

pub fn format_weights(w: &ClassWeights, classes: &[String]) -> String {
    let mut out = format!("#spkembed-weights dim={} classes={}\n", w.dim(), w.classes());
    for (id, col) in classes.iter().zip(w.columns()) {
        let _ = writeln!(out, "{id} {}", join(col));
    }
    out
}

pub fn parse_weights(text: &str, source: &str) -> Result<(ClassWeights, Vec<String>)> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "empty weights file"))?;
    let f = header_fields(header, "#spkembed-weights", source)?;
    let dim = header_usize(&f, "dim", source)?;
    let n = header_usize(&f, "classes", source)?;
    let mut ids = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(dim * n);
    for (ln, l) in lines.filter(|(_, l)| !l.is_empty()) {
        let (id, rest) = l
            .split_once(char::is_whitespace)
            .ok_or_else(|| Error::parse(source, ln, "expected `<class_id> <values>`"))?;
        ids.push(id.to_string());
        data.extend(parse_row(rest, dim, source, ln)?);
    }
    if ids.len() != n {
        return Err(Error::parse(
            source,
            1,
            format!("header announces {n} classes, found {}", ids.len()),
        ));
    }
    Ok((ClassWeights::from_column_major(dim, n, data)?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SpeakerSpec};
    use crate::testutil::{assert_grad_close, numeric_grad};

    fn tiny_shape() -> EncoderShape {
        EncoderShape {
            input_dim: 3,
            hidden: vec![5, 4],
            output_dim: 6,
        }
    }

    fn utt(frames: Vec<Vec<f64>>) -> Utterance {
        Utterance {
            id: "u".into(),
            speaker_id: "s".into(),
            frames,
        }
    }

    fn random_params(seed: u64) -> EncoderParams {
        EncoderParams::init(tiny_shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn repeated_frames_pool_to_single_frame() {
        let p = random_params(1);
        let f = vec![0.3, -0.2, 0.9];
        let one = encode(&utt(vec![f.clone()]), &p).unwrap();
        let many = encode(&utt(vec![f.clone(), f.clone(), f.clone(), f]), &p).unwrap();
        for (a, b) in one.iter().zip(&many) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn frame_order_does_not_matter() {
        let p = random_params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let frames: Vec<Vec<f64>> = (0..9)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mut rev = frames.clone();
        rev.reverse();
        rev.swap(0, 4);
        assert_eq!(encode(&utt(frames), &p).unwrap(), encode(&utt(rev), &p).unwrap());
    }

    #[test]
    fn empty_utterance_is_an_error() {
        assert!(encode(&utt(vec![]), &random_params(0)).is_err());
        assert!(encode(&utt(vec![vec![1.0]]), &random_params(0)).is_err());
    }

    #[test]
    fn jacobian_vector_product_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..10 {
            let p = random_params(seed);
            let frames: Vec<Vec<f64>> = (0..4)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let u = utt(frames);
            let v: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fwd = p.forward(&u).unwrap();
            let mut analytic = vec![0.0; p.as_slice().len()];
            p.backward(&fwd, &v, &mut analytic);
            let numeric = numeric_grad(p.as_slice(), |d| {
                let q = EncoderParams::from_data(tiny_shape(), d.to_vec()).unwrap();
                encode(&u, &q).unwrap().iter().zip(&v).map(|(a, b)| a * b).sum()
            });
            assert_grad_close(&analytic, &numeric, 1e-4);
        }
    }

    #[test]
    fn head_only_encoder_pools_raw_frames() {
        let shape = EncoderShape {
            input_dim: 2,
            hidden: vec![],
            output_dim: 2,
        };
        let p = EncoderParams::from_data(shape, vec![1.0, 0.0, 0.0, 1.0, 0.5, -0.5]).unwrap();
        let e = encode(&utt(vec![vec![1.0, 2.0], vec![3.0, 4.0]]), &p).unwrap();
        assert_eq!(e, vec![2.5, 2.5]);
        let fwd = p.forward(&utt(vec![vec![1.0, 2.0]])).unwrap();
        let mut g = vec![0.0; 6];
        p.backward(&fwd, &[1.0, 0.0], &mut g);
        assert_eq!(g, vec![1.0, 2.0, 0.0, 0.0, 1.0, 0.0]);
    }

    fn spec(n_speakers: usize, utts: usize, seed: u64) -> SpeakerSpec {
        SpeakerSpec {
            n_speakers,
            frames_dim: 4,
            min_frames: 2,
            max_frames: 4,
            utts_per_speaker: utts,
            within_spread: 0.2,
            between_spread: 1.0,
            seed,
        }
    }

    #[test]
    fn batches_are_balanced() {
        let ds = generate(&spec(6, 8, 1)).unwrap();
        let batches = balanced_batches(&ds, 3, 4, 7).unwrap();
        assert_eq!(batches.len(), 48 / 12);
        for b in &batches {
            let mut counts = std::collections::BTreeMap::new();
            for &i in b {
                *counts.entry(&ds.utterances[i].speaker_id).or_insert(0) += 1;
            }
            assert_eq!(counts.len(), 3);
            assert!(counts.values().all(|&c| c == 4));
            let mut unique = b.clone();
            unique.sort();
            unique.dedup();
            assert_eq!(unique.len(), b.len());
        }
        assert_eq!(batches, balanced_batches(&ds, 3, 4, 7).unwrap());
        assert_ne!(batches, balanced_batches(&ds, 3, 4, 8).unwrap());
    }

    #[test]
    fn one_per_speaker_batches_cover_everyone() {
        let ds = generate(&spec(5, 3, 2)).unwrap();
        for b in balanced_batches(&ds, 5, 1, 0).unwrap() {
            let mut spk: Vec<&str> = b.iter().map(|&i| ds.utterances[i].speaker_id.as_str()).collect();
            spk.sort();
            assert_eq!(spk, ds.speakers().iter().map(String::as_str).collect::<Vec<_>>());
        }
    }

    #[test]
    fn infeasible_batches_are_rejected() {
        let ds = generate(&spec(4, 3, 2)).unwrap();
        assert!(matches!(
            balanced_batches(&ds, 5, 1, 0),
            Err(Error::InsufficientData(_))
        ));
        assert!(balanced_batches(&ds, 2, 4, 0).is_err());
        assert!(balanced_batches(&ds, 0, 1, 0).is_err());
    }

    #[test]
    fn sgd_recurrences() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.5, 0.25], 0.1, 0.0, &mut v).unwrap();
        assert_eq!(p, vec![1.0 - 0.1 * 0.5, -2.0 - 0.1 * 0.25]);

        let mut p = vec![3.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[0.0], 0.1, 0.9, &mut v).unwrap();
        assert_eq!((p[0], v[0]), (3.0, 0.0));

        let (g1, g2, lr, mu) = (0.7, -0.3, 0.05, 0.9);
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[g1], lr, mu, &mut v).unwrap();
        sgd_step(&mut p, &[g2], lr, mu, &mut v).unwrap();
        let v1 = g1;
        let v2 = mu * v1 + g2;
        let want = 1.0 - lr * v1 - lr * v2;
        assert!((p[0] - want).abs() < 1e-12);
        assert!((v[0] - v2).abs() < 1e-12);

        assert!(matches!(
            sgd_step(&mut p, &[f64::NAN], 0.1, 0.0, &mut v),
            Err(Error::NonFinite(_))
        ));
        assert!(sgd_step(&mut p, &[1.0, 2.0], 0.1, 0.0, &mut v).is_err());
    }

    #[test]
    fn learning_rate_steps() {
        let cfg = TrainingConfig {
            epochs: 40,
            ..TrainingConfig::default()
        };
        assert_eq!(lr_schedule(0, &cfg), 0.1);
        assert_eq!(lr_schedule(19, &cfg), 0.1);
        assert_eq!(lr_schedule(20, &cfg), 0.01);
        assert_eq!(lr_schedule(29, &cfg), 0.01);
        assert_eq!(lr_schedule(30, &cfg), 0.001);
        assert_eq!(lr_schedule(1000, &cfg), 0.001);
        let cfg = TrainingConfig {
            milestones: vec![1, 2, 3, 4],
            ..cfg
        };
        assert_eq!(lr_schedule(10, &cfg), 0.001);
    }

    #[test]
    fn config_validation() {
        let ok = TrainingConfig::default();
        assert!(ok.validate().is_ok());
        assert!(TrainingConfig {
            lr_final: 0.2,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            milestones: vec![5, 5],
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            momentum: 1.0,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            classes_per_batch: 1,
            utts_per_class: 1,
            ..ok.clone()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            margins: MarginConfig {
                m1: 2.0,
                m2: 0.1,
                m3: 0.0
            },
            ..ok
        }
        .validate()
        .is_err());
    }

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            hidden: vec![16],
            embedding_dim: 8,
            epochs: 3,
            classes_per_batch: 4,
            utts_per_class: 2,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leave_the_initial_model() {
        let ds = generate(&spec(4, 4, 3)).unwrap();
        let cfg = TrainingConfig {
            epochs: 0,
            ..small_config()
        };
        let out = train(&ds, &cfg).unwrap();
        let (p, w, classes) = init_model(&ds, &cfg).unwrap();
        assert_eq!((out.params, out.weights, out.classes), (p, w, classes));
        assert!(out.log.is_empty());
    }

    #[test]
    fn training_is_reproducible() {
        let ds = generate(&spec(4, 4, 3)).unwrap();
        let cfg = TrainingConfig {
            margins: MarginConfig::additive_cosine(0.2),
            reg: RegConfig::default(),
            ..small_config()
        };
        let a = train(&ds, &cfg).unwrap();
        let b = train(&ds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.log.len(), 3);
        assert!(a.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn divergence_is_reported() {
        let ds = generate(&spec(4, 4, 3)).unwrap();
        let cfg = TrainingConfig {
            loss: LossKind::Softmax,
            lr_init: 1e150,
            lr_final: 1.0,
            head_init_scale: 1e100,
            ..small_config()
        };
        match train(&ds, &cfg) {
            Err(Error::Diverged { log, .. }) => assert!(log.len() < 3),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn file_formats_round_trip() {
        let p = random_params(9);
        assert_eq!(parse_encoder(&format_encoder(&p), "enc").unwrap(), p);
        let w = ClassWeights::from_columns(&[vec![0.1, 0.2], vec![-3.0, 1e-9], vec![0.5, 0.5]]).unwrap();
        let ids = vec!["a".to_string(), "b".into(), "c".into()];
        assert_eq!(parse_weights(&format_weights(&w, &ids), "w").unwrap(), (w, ids));
        let bad = format_encoder(&p).replacen("\n", "\n1 2\n", 2);
        assert!(matches!(parse_encoder(&bad, "enc"), Err(Error::Parse { .. })));
        assert!(parse_weights("#spkembed-weights dim=2 classes=3\na 1 2\n", "w").is_err());
    }

    #[test]
    fn log_has_one_line_per_epoch() {
        let rec = EpochRecord {
            epoch: 0,
            loss: 1.5,
            lr: 0.1,
            lambda: 0.0,
            lambda_blend: 0.5,
            sep_energy: 0.25,
        };
        let text = format_log(&[rec.clone(), EpochRecord { epoch: 1, ..rec }]);
        assert_eq!(text.lines().nth(1), Some("0 1.5 0.1 0 0.5 0.25"));
        assert_eq!(text.lines().count(), 3);
    }

    #[test]
    fn extraction_matches_direct_encoding() {
        let ds = generate(&spec(3, 3, 1)).unwrap();
        let p = EncoderParams::init(
            EncoderShape {
                input_dim: 4,
                hidden: vec![6],
                output_dim: 5,
            },
            1.0,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let set = extract_embeddings(&ds, &p).unwrap();
        assert_eq!(set.entries.len(), ds.len());
        for ((id, e), u) in set.entries.iter().zip(&ds.utterances) {
            assert_eq!(id, &u.id);
            assert_eq!(e, &encode(u, &p).unwrap());
        }
        assert_eq!(set, extract_embeddings(&ds, &p).unwrap());
        let empty = Dataset {
            spec: ds.spec.clone(),
            utterances: vec![],
        };
        let e = extract_embeddings(&empty, &p).unwrap();
        assert_eq!(crate::data::format_embeddings(&e), "0 5\n");
    }
}
