//! Flat key-value run configuration shared by every pipeline stage.
//!
//! A config file is TOML with one key per line. Any key may be overridden
//! with `key=value` strings, where the value is parsed as a TOML value and
//! falls back to a bare string (`loss=softmax`).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{read_text, SpeakerSpec};
use crate::eval::DcfConfig;
use crate::inter::RegConfig;
use crate::losses::{AnnealConfig, MarginConfig};
use crate::trainer::{LossKind, TrainingConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Total speakers, training plus evaluation.
    pub n_speakers: usize,
    /// Speakers held out for the verification trials.
    pub n_eval_speakers: usize,
    pub frames_dim: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub utts_per_speaker: usize,
    pub within_spread: f64,
    pub between_spread: f64,
    pub n_target: usize,
    pub n_nontarget: usize,

    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
    pub epochs: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub milestones: Vec<usize>,
    pub momentum: f64,
    pub classes_per_batch: usize,
    pub utts_per_class: usize,
    pub head_init_scale: f64,

    pub loss: LossKind,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub lambda_inter: f64,
    pub lambda_base: f64,
    pub lambda_min: f64,
    pub gamma: f64,
    pub ramp_epochs: f64,

    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,

    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let anneal = AnnealConfig::default();
        let dcf = DcfConfig::default();
        Self {
            n_speakers: 64,
            n_eval_speakers: 32,
            frames_dim: 16,
            min_frames: 5,
            max_frames: 15,
            utts_per_speaker: 20,
            within_spread: 0.7,
            between_spread: 1.0,
            n_target: 5000,
            n_nontarget: 20000,
            hidden: vec![64],
            embedding_dim: 64,
            epochs: 30,
            lr_init: 0.1,
            lr_final: 0.001,
            milestones: Vec::new(),
            momentum: 0.9,
            classes_per_batch: 16,
            utts_per_class: 4,
            head_init_scale: 0.1,
            loss: LossKind::Angular,
            m1: 1.0,
            m2: 0.0,
            m3: 0.2,
            lambda_inter: 0.01,
            lambda_base: anneal.lambda_base,
            lambda_min: anneal.lambda_min,
            gamma: anneal.gamma,
            ramp_epochs: 5.0,
            p_target: dcf.p_target,
            c_miss: dcf.c_miss,
            c_fa: dcf.c_fa,
            seed: 0,
        }
    }
}

/// Splits `key=value` and parses the value as TOML, falling back to a string.
pub fn parse_override(s: &str) -> Result<(String, toml::Value)> {
    let (key, raw) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{s}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(Error::Config(format!("override `{s}` has an empty key")));
    }
    let raw = raw.trim();
    let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").expect("parsed table has key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    };
    Ok((key.to_string(), value))
}

impl RunConfig {
    /// Parses TOML text, applies overrides in order, and validates.
    pub fn from_toml_str(text: &str, source: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::Config(format!("{source}: {}", e.message())))?;
        for o in overrides {
            let (k, v) = parse_override(o)?;
            table.insert(k, v);
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(format!("{source}: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` if given (defaults otherwise) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        match path {
            Some(p) => Self::from_toml_str(&read_text(p)?, &p.display().to_string(), overrides),
            None => Self::from_toml_str("", "<defaults>", overrides),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn margins(&self) -> MarginConfig {
        MarginConfig {
            m1: self.m1,
            m2: self.m2,
            m3: self.m3,
        }
    }

    /// Generator spec; uses `seed` directly.
    pub fn speaker_spec(&self) -> SpeakerSpec {
        SpeakerSpec {
            n_speakers: self.n_speakers,
            frames_dim: self.frames_dim,
            min_frames: self.min_frames,
            max_frames: self.max_frames,
            utts_per_speaker: self.utts_per_speaker,
            within_spread: self.within_spread,
            between_spread: self.between_spread,
            seed: self.seed,
        }
    }

    pub fn trial_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn training_config(&self) -> TrainingConfig {
        TrainingConfig {
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            epochs: self.epochs,
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            milestones: self.milestones.clone(),
            momentum: self.momentum,
            classes_per_batch: self.classes_per_batch,
            utts_per_class: self.utts_per_class,
            loss: self.loss,
            margins: self.margins(),
            reg: RegConfig {
                lambda_inter: self.lambda_inter,
            },
            anneal: AnnealConfig {
                lambda_base: self.lambda_base,
                lambda_min: self.lambda_min,
                gamma: self.gamma,
                ramp_steps: 0,
            },
            ramp_epochs: self.ramp_epochs,
            head_init_scale: self.head_init_scale,
            seed: self.seed.wrapping_add(2),
        }
    }

    pub fn dcf(&self) -> DcfConfig {
        DcfConfig {
            p_target: self.p_target,
            c_miss: self.c_miss,
            c_fa: self.c_fa,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |e: Error| Error::Config(e.to_string());
        self.speaker_spec().validate().map_err(wrap)?;
        self.training_config().validate().map_err(wrap)?;
        self.dcf().validate().map_err(wrap)?;
        if self.n_eval_speakers < 2 || self.n_eval_speakers + 2 > self.n_speakers {
            return Err(Error::Config(format!(
                "n_eval_speakers must be >= 2 and leave at least 2 training speakers, got {} of {}",
                self.n_eval_speakers, self.n_speakers
            )));
        }
        if self.n_target == 0 || self.n_nontarget == 0 {
            return Err(Error::Config("n_target and n_nontarget must be positive".into()));
        }
        if self.seed > i64::MAX as u64 {
            return Err(Error::Config(format!("seed must be at most {}", i64::MAX)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml_str(&text, "t", &[]).unwrap(), cfg);
    }

    #[test]
    fn overrides_apply_in_order() {
        let o = ["m3=0.35", "loss=softmax", "hidden=[8, 4]", "seed=7", "seed=9"].map(String::from);
        let cfg = RunConfig::from_toml_str("epochs = 3\n", "t", &o).unwrap();
        assert_eq!(cfg.m3, 0.35);
        assert_eq!(cfg.loss, LossKind::Softmax);
        assert_eq!(cfg.hidden, vec![8, 4]);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.epochs, 3);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            RunConfig::from_toml_str("nonsense_key = 1", "t", &[]),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml_str("epochs = \"x\"", "t", &[]).is_err());
        assert!(RunConfig::from_toml_str("epochs = ", "t", &[]).is_err());
        assert!(RunConfig::from_toml_str("", "t", &["noequals".into()]).is_err());
        assert!(RunConfig::from_toml_str("", "t", &["m3=2.5".into()]).is_err());
        assert!(RunConfig::from_toml_str("", "t", &["n_eval_speakers=63".into()]).is_err());
        assert!(RunConfig::from_toml_str("", "t", &["loss=hinge".into()]).is_err());
    }

    #[test]
    fn derived_configs_share_the_seed_family() {
        let cfg = RunConfig {
            seed: 5,
            ..RunConfig::default()
        };
        assert_eq!(cfg.speaker_spec().seed, 5);
        assert_eq!(cfg.trial_seed(), 6);
        assert_eq!(cfg.training_config().seed, 7);
        assert_eq!(cfg.training_config().reg.lambda_inter, 0.01);
    }
}
