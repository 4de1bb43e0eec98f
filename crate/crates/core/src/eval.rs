//! Verification back-end: cosine trial scoring and detection metrics.
//!
//! Thresholds accept a trial iff `score >= τ`, so tied scores always flip
//! together. The DET sweep visits every distinct score as a threshold plus
//! `+∞` (reject everything).

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::hash::Hash;

use crate::data::{EmbeddingSet, ScoredTrial, TrialList};
use crate::geometry::cosine;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledScore {
    pub score: f64,
    pub target: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreSet {
    pub scores: Vec<LabeledScore>,
}

impl ScoreSet {
    pub fn from_pairs(targets: &[f64], nontargets: &[f64]) -> Self {
        let scores = targets
            .iter()
            .map(|&score| LabeledScore { score, target: true })
            .chain(nontargets.iter().map(|&score| LabeledScore { score, target: false }))
            .collect();
        Self { scores }
    }

    /// Joins a score file with its trial list line by line.
    pub fn from_scored_trials(scores: &[ScoredTrial], trials: &TrialList) -> Result<Self> {
        if scores.len() != trials.len() {
            return Err(Error::DimensionMismatch {
                expected: trials.len(),
                found: scores.len(),
            });
        }
        let scores = scores
            .iter()
            .zip(&trials.trials)
            .map(|(s, t)| {
                if s.a != t.a || s.b != t.b {
                    return Err(Error::InvalidParameter(format!(
                        "score pair ({}, {}) does not match trial ({}, {})",
                        s.a, s.b, t.a, t.b
                    )));
                }
                Ok(LabeledScore {
                    score: s.score,
                    target: t.target,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { scores })
    }

    fn counts(&self) -> (usize, usize) {
        let t = self.scores.iter().filter(|s| s.target).count();
        (t, self.scores.len() - t)
    }

    fn require_both_labels(&self) -> Result<(usize, usize)> {
        let (t, n) = self.counts();
        if t == 0 || n == 0 {
            return Err(Error::InsufficientData(format!(
                "need target and non-target scores, got {t} and {n}"
            )));
        }
        Ok((t, n))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DcfConfig {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
}

impl Default for DcfConfig {
    fn default() -> Self {
        Self {
            p_target: 0.01,
            c_miss: 1.0,
            c_fa: 1.0,
        }
    }
}

impl DcfConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.p_target > 0.0 && self.p_target < 1.0 && self.c_miss > 0.0 && self.c_fa > 0.0;
        if !ok {
            return Err(Error::InvalidParameter(format!("invalid DCF config {self:?}")));
        }
        Ok(())
    }
}

/// Cosine score of every trial, in trial order.
pub fn score_trials(embeddings: &EmbeddingSet, trials: &TrialList) -> Result<Vec<ScoredTrial>> {
    let table = embeddings.lookup();
    let get = |id: &str| table.get(id).copied().ok_or_else(|| Error::UnknownId(id.to_string()));
    trials
        .trials
        .iter()
        .map(|t| {
            Ok(ScoredTrial {
                score: cosine(get(&t.a)?, get(&t.b)?)?,
                a: t.a.clone(),
                b: t.b.clone(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetPoint {
    pub threshold: f64,
    pub p_fa: f64,
    pub p_miss: f64,
}

/// Error rates at every distinct score threshold, in increasing threshold order.
pub fn det_points(s: &ScoreSet) -> Result<Vec<DetPoint>> {
    let (n_tgt, n_non) = s.require_both_labels()?;
    let mut sorted = s.scores.clone();
    sorted.sort_by(|a, b| a.score.total_cmp(&b.score));

    // Walk upwards: everything strictly below the current threshold is rejected.
    let mut points = Vec::new();
    let (mut misses, mut rejected_non) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].score;
        points.push(DetPoint {
            threshold,
            p_fa: (n_non - rejected_non) as f64 / n_non as f64,
            p_miss: misses as f64 / n_tgt as f64,
        });
        while i < sorted.len() && sorted[i].score == threshold {
            if sorted[i].target {
                misses += 1;
            } else {
                rejected_non += 1;
            }
            i += 1;
        }
    }
    points.push(DetPoint {
        threshold: f64::INFINITY,
        p_fa: 0.0,
        p_miss: 1.0,
    });
    Ok(points)
}

/// Equal error rate, linearly interpolated between the bracketing DET points.
pub fn eer(s: &ScoreSet) -> Result<f64> {
    let points = det_points(s)?;
    let k = points
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("the +inf threshold always has p_miss >= p_fa");
    let b = points[k];
    if b.p_miss == b.p_fa {
        return Ok(b.p_fa);
    }
    // k > 0: the first point (accept everything) has p_fa = 1 > p_miss = 0.
    let a = points[k - 1];
    // Solve p_miss(t) = p_fa(t) on the segment a -> b.
    let t = (a.p_fa - a.p_miss) / ((b.p_miss - a.p_miss) - (b.p_fa - a.p_fa));
    Ok(a.p_fa + t * (b.p_fa - a.p_fa))
}

/// Minimum over thresholds of `c_miss·P_miss·p + c_fa·P_fa·(1 − p)`.
pub fn min_dcf(s: &ScoreSet, cfg: &DcfConfig) -> Result<f64> {
    cfg.validate()?;
    let points = det_points(s)?;
    Ok(points
        .iter()
        .map(|p| cfg.c_miss * p.p_miss * cfg.p_target + cfg.c_fa * p.p_fa * (1.0 - cfg.p_target))
        .fold(f64::INFINITY, f64::min))
}

/// Between-class angular variance of the class-mean embeddings.
pub fn between_class_variance<L>(embeddings: &[Vec<f64>], labels: &[L]) -> Result<f64>
where
    L: Ord + Clone,
{
    if embeddings.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: embeddings.len(),
            found: labels.len(),
        });
    }
    let mut sums: BTreeMap<L, (Vec<f64>, usize)> = BTreeMap::new();
    for (x, l) in embeddings.iter().zip(labels) {
        let entry = sums.entry(l.clone()).or_insert_with(|| (vec![0.0; x.len()], 0));
        if entry.0.len() != x.len() {
            return Err(Error::DimensionMismatch {
                expected: entry.0.len(),
                found: x.len(),
            });
        }
        entry.0.iter_mut().zip(x).for_each(|(s, v)| *s += v);
        entry.1 += 1;
    }
    let c = sums.len();
    if c < 2 {
        return Err(Error::InsufficientData(format!("need at least 2 classes, got {c}")));
    }
    let classes: Vec<(Vec<f64>, usize)> = sums
        .into_values()
        .map(|(s, n)| (s.iter().map(|v| v / n as f64).collect(), n))
        .collect();
    let n_total = embeddings.len() as f64;
    let mut total = 0.0;
    for (i, (mi, ni)) in classes.iter().enumerate() {
        let mut inner = 0.0;
        for (j, (mj, _)) in classes.iter().enumerate() {
            if i != j {
                inner += 1.0 - cosine(mi, mj)?;
            }
        }
        total += *ni as f64 * inner;
    }
    Ok(total / n_total / (c - 1) as f64)
}

/// Sample mean and unbiased standard deviation of the non-target scores.
pub fn nontarget_stats(s: &ScoreSet) -> Result<(f64, f64)> {
    let values: Vec<f64> = s.scores.iter().filter(|x| !x.target).map(|x| x.score).collect();
    if values.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "need at least 2 non-target scores, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt()))
}

/// S_b for an embedding set whose utterance ids map to speakers through `speaker_of`.
pub fn embedding_set_sb<K>(set: &EmbeddingSet, speaker_of: &HashMap<K, K>) -> Result<f64>
where
    K: std::borrow::Borrow<str> + Eq + Hash + Ord + Clone,
{
    let mut xs = Vec::with_capacity(set.entries.len());
    let mut labels = Vec::with_capacity(set.entries.len());
    for (id, v) in &set.entries {
        let spk = speaker_of
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownId(id.clone()))?;
        xs.push(v.clone());
        labels.push(spk.clone());
    }
    between_class_variance(&xs, &labels)
}

/// Every metric of the report line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub sb: Option<f64>,
    pub nontarget_mean: f64,
    pub nontarget_std: f64,
}

impl MetricReport {
    pub fn compute(s: &ScoreSet, cfg: &DcfConfig, sb: Option<f64>) -> Result<Self> {
        let (nontarget_mean, nontarget_std) = nontarget_stats(s)?;
        Ok(Self {
            eer: eer(s)?,
            min_dcf: min_dcf(s, cfg)?,
            sb,
            nontarget_mean,
            nontarget_std,
        })
    }

    /// `eer=<v> mindcf=<v> sb=<v> nontarget_mean=<v> nontarget_std=<v>`; `sb=nan` when unknown.
    pub fn to_line(&self) -> String {
        format!(
            "eer={} mindcf={} sb={} nontarget_mean={} nontarget_std={}",
            self.eer,
            self.min_dcf,
            self.sb.unwrap_or(f64::NAN),
            self.nontarget_mean,
            self.nontarget_std
        )
    }
}

/// `<threshold> <p_fa> <p_miss>` per line.
pub fn format_det(points: &[DetPoint]) -> String {
    let mut out = String::from("# threshold p_fa p_miss\n");
    for p in points {
        let _ = writeln!(out, "{} {} {}", p.threshold, p.p_fa, p.p_miss);
    }
    out
}
