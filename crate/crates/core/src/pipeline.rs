//! Pipeline stages: in-memory building blocks and the file-level commands
//! behind the `spkembed` binary.
//!
//! Every file command is a pure function of its input files and the run
//! configuration. Commands that consume a configuration echo the resolved
//! version to `config.toml` in their output directory before doing any work.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::{parse_override, RunConfig};
use crate::data::{
    format_dataset, format_embeddings, format_scores, format_trials, generate, make_trials, read_dataset,
    read_embeddings, read_scores, read_text, read_trials, write_text, Dataset, EmbeddingSet, ScoredTrial, TrialList,
};
use crate::eval::{
    det_points, embedding_set_sb, format_det, score_trials, DcfConfig, DetPoint, MetricReport, ScoreSet,
};
use crate::inter::sep_energy;
use crate::trainer::{
    extract_embeddings, format_encoder, format_log, format_weights, parse_encoder, parse_weights, train, TrainOutcome,
};
use crate::{Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const TRAIN_DATASET_FILE: &str = "train.dataset";
pub const EVAL_DATASET_FILE: &str = "eval.dataset";
pub const TRIALS_FILE: &str = "trials.txt";
pub const ENCODER_FILE: &str = "encoder.txt";
pub const WEIGHTS_FILE: &str = "weights.txt";
pub const LOG_FILE: &str = "train.log";
pub const EMBEDDINGS_FILE: &str = "embeddings.txt";
pub const SCORES_FILE: &str = "scores.txt";
pub const REPORT_FILE: &str = "report.txt";
pub const DET_FILE: &str = "det.txt";
pub const SWEEP_FILE: &str = "sweep.txt";

/// Training speakers, held-out speakers and trials over the held-out set.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub eval: Dataset,
    pub trials: TrialList,
}

pub fn generate_data(cfg: &RunConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let all = generate(&cfg.speaker_spec())?;
    let (train, eval) = all.split_speakers(cfg.n_eval_speakers)?;
    let trials = make_trials(&eval, cfg.n_target, cfg.n_nontarget, cfg.trial_seed())?;
    Ok(GeneratedData { train, eval, trials })
}

/// Everything produced by training and evaluating one system.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemResult {
    pub outcome: TrainOutcome,
    pub embeddings: EmbeddingSet,
    pub scores: Vec<ScoredTrial>,
    pub report: MetricReport,
    pub det: Vec<DetPoint>,
    pub sep: f64,
}

pub fn evaluate_scores(
    scores: &[ScoredTrial],
    trials: &TrialList,
    dcf: &DcfConfig,
    sb: Option<f64>,
) -> Result<(MetricReport, Vec<DetPoint>)> {
    let set = ScoreSet::from_scored_trials(scores, trials)?;
    Ok((MetricReport::compute(&set, dcf, sb)?, det_points(&set)?))
}

/// Trains on `data.train` and evaluates on the held-out trials.
pub fn run_system(cfg: &RunConfig, data: &GeneratedData) -> Result<SystemResult> {
    cfg.validate()?;
    let outcome = train(&data.train, &cfg.training_config())?;
    let embeddings = extract_embeddings(&data.eval, &outcome.params)?;
    let scores = score_trials(&embeddings, &data.trials)?;
    let sb = embedding_set_sb(&embeddings, &data.eval.speaker_map())?;
    let (report, det) = evaluate_scores(&scores, &data.trials, &cfg.dcf(), Some(sb))?;
    let sep = sep_energy(&outcome.weights)?;
    Ok(SystemResult {
        outcome,
        embeddings,
        scores,
        report,
        det,
        sep,
    })
}

fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    write_text(&out_dir.join(CONFIG_FILE), &cfg.to_toml()?)
}

// ---------------------------------------------------------------------------
// File commands

/// Writes the training and evaluation datasets and the trial list.
pub fn cmd_gen(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    echo_config(cfg, out_dir)?;
    let data = generate_data(cfg)?;
    write_text(&out_dir.join(TRAIN_DATASET_FILE), &format_dataset(&data.train))?;
    write_text(&out_dir.join(EVAL_DATASET_FILE), &format_dataset(&data.eval))?;
    write_text(&out_dir.join(TRIALS_FILE), &format_trials(&data.trials))
}

/// Trains on a dataset file and writes encoder, class weights and the log.
///
/// On divergence the log of the completed epochs is still written.
pub fn cmd_train(cfg: &RunConfig, dataset: &Path, out_dir: &Path) -> Result<TrainOutcome> {
    echo_config(cfg, out_dir)?;
    let ds = read_dataset(dataset)?;
    let outcome = match train(&ds, &cfg.training_config()) {
        Ok(o) => o,
        Err(e) => {
            if let Error::Diverged { log, .. } = &e {
                write_text(&out_dir.join(LOG_FILE), &format_log(log))?;
            }
            return Err(e);
        }
    };
    write_text(&out_dir.join(ENCODER_FILE), &format_encoder(&outcome.params))?;
    write_text(
        &out_dir.join(WEIGHTS_FILE),
        &format_weights(&outcome.weights, &outcome.classes),
    )?;
    write_text(&out_dir.join(LOG_FILE), &format_log(&outcome.log))?;
    Ok(outcome)
}

pub fn cmd_extract(encoder: &Path, dataset: &Path, out_dir: &Path) -> Result<EmbeddingSet> {
    let params = parse_encoder(&read_text(encoder)?, &encoder.display().to_string())?;
    let ds = read_dataset(dataset)?;
    let set = extract_embeddings(&ds, &params)?;
    write_text(&out_dir.join(EMBEDDINGS_FILE), &format_embeddings(&set))?;
    Ok(set)
}

pub fn cmd_score(embeddings: &Path, trials: &Path, out_dir: &Path) -> Result<Vec<ScoredTrial>> {
    let set = read_embeddings(embeddings)?;
    let list = read_trials(trials)?;
    let scores = score_trials(&set, &list)?;
    write_text(&out_dir.join(SCORES_FILE), &format_scores(&scores))?;
    Ok(scores)
}

/// Embeddings and the dataset that labels them, for the S_b column.
#[derive(Debug, Clone)]
pub struct SbInputs {
    pub embeddings: PathBuf,
    pub dataset: PathBuf,
}

/// Writes the one-line metric report and the DET points.
pub fn cmd_eval(
    cfg: &RunConfig,
    scores: &Path,
    trials: &Path,
    sb_inputs: Option<&SbInputs>,
    out_dir: &Path,
) -> Result<MetricReport> {
    echo_config(cfg, out_dir)?;
    let scored = read_scores(scores)?;
    let list = read_trials(trials)?;
    let sb = sb_inputs.map(|s| cmd_sb(&s.embeddings, &s.dataset)).transpose()?;
    let (report, det) = evaluate_scores(&scored, &list, &cfg.dcf(), sb)?;
    write_text(&out_dir.join(REPORT_FILE), &(report.to_line() + "\n"))?;
    write_text(&out_dir.join(DET_FILE), &format_det(&det))?;
    Ok(report)
}

pub fn cmd_sep(weights: &Path) -> Result<f64> {
    let (w, _) = parse_weights(&read_text(weights)?, &weights.display().to_string())?;
    sep_energy(&w)
}

pub fn cmd_sb(embeddings: &Path, dataset: &Path) -> Result<f64> {
    let set = read_embeddings(embeddings)?;
    let ds = read_dataset(dataset)?;
    embedding_set_sb(&set, &ds.speaker_map())
}

// ---------------------------------------------------------------------------
// Sweep

/// A named system: comma-separated `key=value` overrides on the base config.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub overrides: Vec<String>,
}

impl SystemSpec {
    /// Splits on commas outside brackets, so `hidden=[8,4],m3=0.2` is two overrides.
    pub fn parse(s: &str) -> Result<Self> {
        let mut overrides = Vec::new();
        let mut depth = 0i32;
        let mut cur = String::new();
        for ch in s.chars() {
            match ch {
                '[' => depth += 1,
                ']' => depth -= 1,
                _ => {}
            }
            if ch == ',' && depth == 0 {
                overrides.push(std::mem::take(&mut cur));
            } else {
                cur.push(ch);
            }
        }
        overrides.push(cur);
        let overrides: Vec<String> = overrides
            .into_iter()
            .map(|o| o.trim().to_string())
            .filter(|o| !o.is_empty())
            .collect();
        if overrides.is_empty() {
            return Err(Error::Config(format!("empty system `{s}`")));
        }
        for o in &overrides {
            parse_override(o)?;
        }
        Ok(Self {
            name: s.split_whitespace().collect(),
            overrides,
        })
    }

    pub fn apply(&self, base: &RunConfig) -> Result<RunConfig> {
        RunConfig::from_toml_str(&base.to_toml()?, &self.name, &self.overrides)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub name: String,
    /// `None` when training diverged.
    pub result: Option<SweepMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepMetrics {
    pub report: MetricReport,
    pub sep: f64,
    pub final_loss: f64,
}

/// Runs every system on its own thread; rows keep the order of `systems`.
pub fn run_sweep(base: &RunConfig, systems: &[SystemSpec]) -> Result<Vec<SweepRow>> {
    let run_one = |s: &SystemSpec| -> Result<SweepRow> {
        let cfg = s.apply(base)?;
        let data = generate_data(&cfg)?;
        let result = match run_system(&cfg, &data) {
            Ok(r) => Some(SweepMetrics {
                report: r.report,
                sep: r.sep,
                final_loss: r.outcome.log.last().map_or(f64::NAN, |e| e.loss),
            }),
            Err(Error::Diverged { .. }) => None,
            Err(e) => return Err(e),
        };
        Ok(SweepRow {
            name: s.name.clone(),
            result,
        })
    };
    std::thread::scope(|scope| {
        let handles: Vec<_> = systems.iter().map(|s| scope.spawn(move || run_one(s))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("sweep worker panicked"))
            .collect()
    })
}

pub fn format_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("# system eer mindcf sep sb nontarget_mean nontarget_std final_loss status\n");
    for row in rows {
        let _ = match &row.result {
            Some(m) => writeln!(
                out,
                "{} {} {} {} {} {} {} {} ok",
                row.name,
                m.report.eer,
                m.report.min_dcf,
                m.sep,
                m.report.sb.unwrap_or(f64::NAN),
                m.report.nontarget_mean,
                m.report.nontarget_std,
                m.final_loss
            ),
            None => writeln!(out, "{} NaN NaN NaN NaN NaN NaN NaN diverged", row.name),
        };
    }
    out
}

/// Trains and evaluates every system on its own generated data and writes one table.
pub fn cmd_sweep(base: &RunConfig, systems: &[SystemSpec], out_dir: &Path) -> Result<Vec<SweepRow>> {
    echo_config(base, out_dir)?;
    if systems.is_empty() {
        return Err(Error::Config("sweep needs at least one system".into()));
    }
    let rows = run_sweep(base, systems)?;
    write_text(&out_dir.join(SWEEP_FILE), &format_sweep(&rows))?;
    Ok(rows)
}
