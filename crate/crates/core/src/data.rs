//! Synthetic speakers, trial lists and the line-oriented file formats.
//!
//! All randomness comes from ChaCha8 seeded with a `u64`, so every generator
//! here is a pure function of its arguments.
//!
//! Formats (floats are written with Rust's shortest round-trip representation):
//!
//! - dataset: a `#spkembed-dataset key=value ...` header echoing the
//!   [`SpeakerSpec`], then per utterance a `<utt_id> <speaker_id> <n_frames>`
//!   line followed by `n_frames` rows of `frames_dim` values.
//! - trial list: `<0|1> <utt_a> <utt_b>` per line, 1 marking a target trial.
//! - embeddings: a `<count> <dim>` header, then `<utt_id> <v1> ... <vd>`.
//! - scores: `<score> <utt_a> <utt_b>` per line, in trial-list order.
//!
//! Trial and score files start with a `#` header line. Their readers skip
//! `#` lines and blank lines, so header-less lists are accepted too.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerSpec {
    pub n_speakers: usize,
    pub frames_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub utts_per_speaker: usize,
    /// Standard deviation of the per-frame isotropic noise.
    pub within_spread: f64,
    /// Radius of the sphere the speaker centres are drawn on.
    pub between_spread: f64,
    pub seed: u64,
}

impl Default for SpeakerSpec {
    fn default() -> Self {
        Self {
            n_speakers: 8,
            frames_dim: 16,
            min_frames: 5,
            max_frames: 20,
            utts_per_speaker: 10,
            within_spread: 0.5,
            between_spread: 1.0,
            seed: 0,
        }
    }
}

impl SpeakerSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::InvalidParameter(format!("speaker spec: {m}")));
        if self.n_speakers < 2 {
            return err("n_speakers must be >= 2");
        }
        if self.frames_dim < 2 {
            return err("frames_dim must be >= 2");
        }
        if self.min_frames == 0 || self.min_frames > self.max_frames {
            return err("need 1 <= min_frames <= max_frames");
        }
        if self.utts_per_speaker < 2 {
            return err("utts_per_speaker must be >= 2");
        }
        if !(self.within_spread >= 0.0 && self.within_spread.is_finite()) {
            return err("within_spread must be finite and >= 0");
        }
        if !(self.between_spread > 0.0 && self.between_spread.is_finite()) {
            return err("between_spread must be finite and > 0");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub speaker_id: String,
    pub frames: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// The generator settings this dataset (or its parent, after a split) came from.
    pub spec: SpeakerSpec,
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    /// Sorted distinct speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.utterances.iter().map(|u| u.speaker_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// utterance id -> speaker id
    pub fn speaker_map(&self) -> HashMap<&str, &str> {
        self.utterances
            .iter()
            .map(|u| (u.id.as_str(), u.speaker_id.as_str()))
            .collect()
    }

    /// Splits off the last `n_heldout` speakers (in sorted id order).
    pub fn split_speakers(&self, n_heldout: usize) -> Result<(Dataset, Dataset)> {
        let speakers = self.speakers();
        if n_heldout == 0 || n_heldout >= speakers.len() {
            return Err(Error::InvalidParameter(format!(
                "cannot hold out {n_heldout} of {} speakers",
                speakers.len()
            )));
        }
        let cut = speakers.len() - n_heldout;
        let heldout: std::collections::HashSet<&str> = speakers[cut..].iter().map(String::as_str).collect();
        let (test, train): (Vec<Utterance>, Vec<Utterance>) = self
            .utterances
            .iter()
            .cloned()
            .partition(|u| heldout.contains(u.speaker_id.as_str()));
        Ok((
            Dataset {
                spec: self.spec.clone(),
                utterances: train,
            },
            Dataset {
                spec: self.spec.clone(),
                utterances: test,
            },
        ))
    }
}

/// Draws speaker centres on a sphere of radius `between_spread` and frames as
/// centre plus isotropic Gaussian noise.
pub fn generate(spec: &SpeakerSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.frames_dim;
    let mut centers = Vec::with_capacity(spec.n_speakers);
    for _ in 0..spec.n_speakers {
        let mut c: Vec<f64>;
        loop {
            c = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            let n = crate::geometry::norm(&c);
            if n > 0.0 {
                c.iter_mut().for_each(|v| *v *= spec.between_spread / n);
                break;
            }
        }
        centers.push(c);
    }

    let width = (spec.n_speakers - 1).to_string().len().max(3);
    let uwidth = (spec.utts_per_speaker - 1).to_string().len().max(3);
    let mut utterances = Vec::with_capacity(spec.n_speakers * spec.utts_per_speaker);
    for (s, center) in centers.iter().enumerate() {
        let speaker_id = format!("spk{s:0width$}");
        for u in 0..spec.utts_per_speaker {
            let n_frames = rng.random_range(spec.min_frames..=spec.max_frames);
            let frames = (0..n_frames)
                .map(|_| {
                    center
                        .iter()
                        .map(|&c| {
                            let z: f64 = rng.sample(StandardNormal);
                            c + spec.within_spread * z
                        })
                        .collect()
                })
                .collect();
            utterances.push(Utterance {
                id: format!("{speaker_id}-u{u:0uwidth$}"),
                speaker_id: speaker_id.clone(),
                frames,
            });
        }
    }
    Ok(Dataset {
        spec: spec.clone(),
        utterances,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub target: bool,
    pub a: String,
    pub b: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

/// Samples distinct unordered utterance pairs, `n_target` from the same
/// speaker and `n_nontarget` from different speakers, in shuffled order.
pub fn make_trials(dataset: &Dataset, n_target: usize, n_nontarget: usize, seed: u64) -> Result<TrialList> {
    let utts = &dataset.utterances;
    let mut target_pairs = Vec::new();
    let mut nontarget_pairs = Vec::new();
    for i in 0..utts.len() {
        for j in i + 1..utts.len() {
            if utts[i].speaker_id == utts[j].speaker_id {
                target_pairs.push((i, j));
            } else {
                nontarget_pairs.push((i, j));
            }
        }
    }
    if n_target > target_pairs.len() {
        return Err(Error::InsufficientData(format!(
            "requested {n_target} target trials but only {} same-speaker pairs exist",
            target_pairs.len()
        )));
    }
    if n_nontarget > nontarget_pairs.len() {
        return Err(Error::InsufficientData(format!(
            "requested {n_nontarget} non-target trials but only {} cross-speaker pairs exist",
            nontarget_pairs.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<(bool, (usize, usize))> = Vec::with_capacity(n_target + n_nontarget);
    for k in index::sample(&mut rng, target_pairs.len(), n_target) {
        picked.push((true, target_pairs[k]));
    }
    for k in index::sample(&mut rng, nontarget_pairs.len(), n_nontarget) {
        picked.push((false, nontarget_pairs[k]));
    }
    picked.shuffle(&mut rng);
    Ok(TrialList {
        trials: picked
            .into_iter()
            .map(|(target, (i, j))| Trial {
                target,
                a: utts[i].id.clone(),
                b: utts[j].id.clone(),
            })
            .collect(),
    })
}

/// Utterance-level embeddings in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub dim: usize,
    pub entries: Vec<(String, Vec<f64>)>,
}

impl EmbeddingSet {
    pub fn lookup(&self) -> HashMap<&str, &[f64]> {
        self.entries.iter().map(|(id, v)| (id.as_str(), v.as_slice())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub score: f64,
    pub a: String,
    pub b: String,
}

// ---------------------------------------------------------------------------
// Writing

pub fn format_dataset(ds: &Dataset) -> String {
    let s = &ds.spec;
    let mut out = format!(
        "#spkembed-dataset n_speakers={} frames_dim={} min_frames={} max_frames={} \
         utts_per_speaker={} within_spread={} between_spread={} seed={}\n",
        s.n_speakers,
        s.frames_dim,
        s.min_frames,
        s.max_frames,
        s.utts_per_speaker,
        s.within_spread,
        s.between_spread,
        s.seed
    );
    for u in &ds.utterances {
        let _ = writeln!(out, "{} {} {}", u.id, u.speaker_id, u.frames.len());
        for f in &u.frames {
            push_row(&mut out, f);
        }
    }
    out
}

fn push_row(out: &mut String, values: &[f64]) {
    for (k, v) in values.iter().enumerate() {
        if k > 0 {
            out.push(' ');
        }
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

pub fn format_trials(list: &TrialList) -> String {
    let mut out = String::from("# target utt_a utt_b\n");
    for t in &list.trials {
        let _ = writeln!(out, "{} {} {}", u8::from(t.target), t.a, t.b);
    }
    out
}

pub fn format_embeddings(set: &EmbeddingSet) -> String {
    let mut out = format!("{} {}\n", set.entries.len(), set.dim);
    for (id, v) in &set.entries {
        out.push_str(id);
        out.push(' ');
        push_row(&mut out, v);
    }
    out
}

pub fn format_scores(scores: &[ScoredTrial]) -> String {
    let mut out = String::from("# score utt_a utt_b\n");
    for s in scores {
        let _ = writeln!(out, "{} {} {}", s.score, s.a, s.b);
    }
    out
}

// ---------------------------------------------------------------------------
// Parsing

/// Numbered, non-comment, non-blank lines.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_num<T: FromStr>(tok: &str, what: &str, source: &str, line: usize) -> Result<T> {
    tok.parse()
        .map_err(|_| Error::parse(source, line, format!("invalid {what} `{tok}`")))
}

fn parse_floats<'a>(toks: impl Iterator<Item = &'a str>, expect: usize, source: &str, line: usize) -> Result<Vec<f64>> {
    let v = toks
        .map(|t| parse_num::<f64>(t, "number", source, line))
        .collect::<Result<Vec<f64>>>()?;
    if v.len() != expect {
        return Err(Error::parse(
            source,
            line,
            format!("expected {expect} values, found {}", v.len()),
        ));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::parse(source, line, "non-finite value"));
    }
    Ok(v)
}

pub fn parse_dataset(text: &str, source: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "missing dataset header"))?;
    let mut fields = header.split_whitespace();
    if fields.next() != Some("#spkembed-dataset") {
        return Err(Error::parse(source, 1, "missing `#spkembed-dataset` header"));
    }
    let kv: BTreeMap<&str, &str> = fields
        .map(|f| {
            f.split_once('=')
                .ok_or_else(|| Error::parse(source, 1, format!("bad field `{f}`")))
        })
        .collect::<Result<_>>()?;
    let get = |k: &str| {
        kv.get(k)
            .copied()
            .ok_or_else(|| Error::parse(source, 1, format!("header lacks `{k}`")))
    };
    let spec = SpeakerSpec {
        n_speakers: parse_num(get("n_speakers")?, "n_speakers", source, 1)?,
        frames_dim: parse_num(get("frames_dim")?, "frames_dim", source, 1)?,
        min_frames: parse_num(get("min_frames")?, "min_frames", source, 1)?,
        max_frames: parse_num(get("max_frames")?, "max_frames", source, 1)?,
        utts_per_speaker: parse_num(get("utts_per_speaker")?, "utts_per_speaker", source, 1)?,
        within_spread: parse_num(get("within_spread")?, "within_spread", source, 1)?,
        between_spread: parse_num(get("between_spread")?, "between_spread", source, 1)?,
        seed: parse_num(get("seed")?, "seed", source, 1)?,
    };
    if kv.len() != 8 {
        return Err(Error::parse(source, 1, "unexpected header fields"));
    }

    let mut lines = lines.filter(|(_, l)| !l.is_empty());
    let mut utterances = Vec::new();
    while let Some((ln, head)) = lines.next() {
        let toks: Vec<&str> = head.split_whitespace().collect();
        let [id, speaker, n] = toks[..] else {
            return Err(Error::parse(source, ln, "expected `<utt_id> <speaker_id> <n_frames>`"));
        };
        let n: usize = parse_num(n, "frame count", source, ln)?;
        if n == 0 {
            return Err(Error::parse(source, ln, "utterance without frames"));
        }
        let mut frames = Vec::with_capacity(n);
        for _ in 0..n {
            let (fl, row) = lines
                .next()
                .ok_or_else(|| Error::parse(source, ln, format!("utterance {id} is truncated")))?;
            frames.push(parse_floats(row.split_whitespace(), spec.frames_dim, source, fl)?);
        }
        utterances.push(Utterance {
            id: id.to_string(),
            speaker_id: speaker.to_string(),
            frames,
        });
    }
    Ok(Dataset { spec, utterances })
}

pub fn parse_trials(text: &str, source: &str) -> Result<TrialList> {
    let trials = content_lines(text)
        .map(|(ln, l)| {
            let toks: Vec<&str> = l.split_whitespace().collect();
            let [label, a, b] = toks[..] else {
                return Err(Error::parse(source, ln, "expected `<0|1> <utt_a> <utt_b>`"));
            };
            let target = match label {
                "1" => true,
                "0" => false,
                _ => return Err(Error::parse(source, ln, format!("label must be 0 or 1, got `{label}`"))),
            };
            Ok(Trial {
                target,
                a: a.to_string(),
                b: b.to_string(),
            })
        })
        .collect::<Result<_>>()?;
    Ok(TrialList { trials })
}

pub fn parse_embeddings(text: &str, source: &str) -> Result<EmbeddingSet> {
    let mut lines = content_lines(text);
    let (hl, header) = lines
        .next()
        .ok_or_else(|| Error::parse(source, 1, "missing `<count> <dim>` header"))?;
    let toks: Vec<&str> = header.split_whitespace().collect();
    let [count, dim] = toks[..] else {
        return Err(Error::parse(source, hl, "expected `<count> <dim>` header"));
    };
    let count: usize = parse_num(count, "count", source, hl)?;
    let dim: usize = parse_num(dim, "dimension", source, hl)?;
    let mut entries = Vec::with_capacity(count);
    for (ln, l) in lines {
        let mut toks = l.split_whitespace();
        let id = toks.next().unwrap_or_default().to_string();
        entries.push((id, parse_floats(toks, dim, source, ln)?));
    }
    if entries.len() != count {
        return Err(Error::parse(
            source,
            hl,
            format!("header announces {count} embeddings, found {}", entries.len()),
        ));
    }
    Ok(EmbeddingSet { dim, entries })
}

pub fn parse_scores(text: &str, source: &str) -> Result<Vec<ScoredTrial>> {
    content_lines(text)
        .map(|(ln, l)| {
            let toks: Vec<&str> = l.split_whitespace().collect();
            let [score, a, b] = toks[..] else {
                return Err(Error::parse(source, ln, "expected `<score> <utt_a> <utt_b>`"));
            };
            let score: f64 = parse_num(score, "score", source, ln)?;
            if !score.is_finite() {
                return Err(Error::parse(source, ln, "non-finite score"));
            }
            Ok(ScoredTrial {
                score,
                a: a.to_string(),
                b: b.to_string(),
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// File helpers

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    parse_dataset(&read_text(path)?, &path.display().to_string())
}

pub fn read_trials(path: &Path) -> Result<TrialList> {
    parse_trials(&read_text(path)?, &path.display().to_string())
}

pub fn read_embeddings(path: &Path) -> Result<EmbeddingSet> {
    parse_embeddings(&read_text(path)?, &path.display().to_string())
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoredTrial>> {
    parse_scores(&read_text(path)?, &path.display().to_string())
}
