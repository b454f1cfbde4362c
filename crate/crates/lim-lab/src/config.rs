//! Flat `key = value` run configuration.
//!
//! One file configures every stage of a run. Lines hold a single
//! `key = value` pair; `#` starts a comment (full-line or trailing); blank
//! lines are ignored; unknown keys are rejected with their line number so a
//! typo cannot silently fall back to a default.

use std::fs;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::data::DataConfig;
use crate::error::{Error, Result};
use crate::lim::LimConfig;
use crate::training::{Objective, TrainConfig};

/// Every tunable for a full run, with the documented defaults.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub data: DataConfig,
    pub backbone: BackboneConfig,
    pub lim: LimConfig,
    pub backbone_train: TrainConfig,
    pub lim_train: TrainConfig,
    /// Equal-width confidence bins for calibration reports.
    pub bins: usize,
    /// Drop probabilities for the sweep, in evaluation order.
    pub drop_probabilities: Vec<f64>,
    /// Per-mode trial count for the latency benchmark.
    pub bench_trials: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            backbone: BackboneConfig::default(),
            lim: LimConfig::default(),
            backbone_train: TrainConfig::backbone_default(),
            lim_train: TrainConfig::default(),
            bins: 10,
            drop_probabilities: vec![0.25, 0.50, 0.75, 1.00],
            bench_trials: 100,
        }
    }
}

impl RunConfig {
    /// Parse a config file and overlay it on the defaults.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    /// Parse config text and overlay it on the defaults.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Parse(format!("line {line_no}: expected `key = value`, got '{raw}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            if value.is_empty() {
                return Err(Error::Parse(format!("line {line_no}: key '{key}' has no value")));
            }
            cfg.set(key, value)
                .map_err(|e| Error::Parse(format!("line {line_no}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.objects" => self.data.objects = parse_usize(key, value)?,
            "data.shapes_per_family" => self.data.shapes_per_family = parse_usize(key, value)?,
            "data.colors" => self.data.colors = parse_usize(key, value)?,
            "data.visual_slots" => self.data.visual_slots = parse_usize(key, value)?,
            "data.train" => self.data.train = parse_usize(key, value)?,
            "data.validation" => self.data.validation = parse_usize(key, value)?,
            "data.test" => self.data.test = parse_usize(key, value)?,

            "backbone.vocab_text" => self.backbone.vocab_text = parse_usize(key, value)?,
            "backbone.vocab_image" => self.backbone.vocab_image = parse_usize(key, value)?,
            "backbone.dim" => self.backbone.dim = parse_usize(key, value)?,
            "backbone.visual_slots" => self.backbone.visual_slots = parse_usize(key, value)?,
            "backbone.max_text_len" => self.backbone.max_text_len = parse_usize(key, value)?,
            "backbone.layers" => self.backbone.layers = parse_usize(key, value)?,
            "backbone.heads" => self.backbone.heads = parse_usize(key, value)?,
            "backbone.ffn_mult" => self.backbone.ffn_mult = parse_usize(key, value)?,
            "backbone.choices" => self.backbone.choices = parse_usize(key, value)?,

            "lim.layers" => self.lim.layers = parse_usize(key, value)?,
            "lim.heads" => self.lim.heads = parse_usize(key, value)?,
            "lim.ffn_mult" => self.lim.ffn_mult = parse_usize(key, value)?,
            "lim.projected" => self.lim.projected = parse_bool(key, value)?,

            "backbone_train.learning_rate" => {
                self.backbone_train.learning_rate = parse_f64(key, value)?
            }
            "backbone_train.weight_decay" => {
                self.backbone_train.weight_decay = parse_f64(key, value)?
            }
            "backbone_train.batch_size" => {
                self.backbone_train.batch_size = parse_usize(key, value)?
            }
            "backbone_train.epochs" => self.backbone_train.epochs = parse_usize(key, value)?,

            "lim_train.learning_rate" => self.lim_train.learning_rate = parse_f64(key, value)?,
            "lim_train.weight_decay" => self.lim_train.weight_decay = parse_f64(key, value)?,
            "lim_train.batch_size" => self.lim_train.batch_size = parse_usize(key, value)?,
            "lim_train.epochs" => self.lim_train.epochs = parse_usize(key, value)?,
            "lim_train.objective" => self.lim_train.objective = Objective::parse(value)?,

            "eval.bins" => self.bins = parse_usize(key, value)?,
            "sweep.probabilities" => {
                self.drop_probabilities = value
                    .split(',')
                    .map(|v| parse_f64("sweep.probabilities", v.trim()))
                    .collect::<Result<_>>()?
            }
            "bench.trials" => self.bench_trials = parse_usize(key, value)?,

            other => {
                return Err(Error::Config(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    /// Cross-field consistency on top of each sub-config's own checks.
    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.backbone.validate()?;
        self.lim.validate(self.backbone.dim)?;
        self.backbone_train.validate()?;
        self.lim_train.validate()?;
        if self.bins == 0 {
            return Err(Error::Config("eval.bins must be positive".into()));
        }
        if self.bench_trials == 0 {
            return Err(Error::Config("bench.trials must be positive".into()));
        }
        for &p in &self.drop_probabilities {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "sweep probability {p} outside [0, 1]"
                )));
            }
        }
        if self.backbone.visual_slots != self.data.visual_slots {
            return Err(Error::Config(format!(
                "backbone.visual_slots {} != data.visual_slots {}",
                self.backbone.visual_slots, self.data.visual_slots
            )));
        }
        if self.backbone.choices != self.data.colors {
            return Err(Error::Config(format!(
                "backbone.choices {} != data.colors {} (answers are color choices)",
                self.backbone.choices, self.data.colors
            )));
        }
        if self.backbone.max_text_len < self.data.text_len() {
            return Err(Error::Config(format!(
                "backbone.max_text_len {} < generated text length {}",
                self.backbone.max_text_len,
                self.data.text_len()
            )));
        }
        if self.backbone.vocab_text < self.data.required_vocab_text() {
            return Err(Error::Config(format!(
                "backbone.vocab_text {} < required {}",
                self.backbone.vocab_text,
                self.data.required_vocab_text()
            )));
        }
        if self.backbone.vocab_image < self.data.required_vocab_image() {
            return Err(Error::Config(format!(
                "backbone.vocab_image {} < required {}",
                self.backbone.vocab_image,
                self.data.required_vocab_image()
            )));
        }
        Ok(())
    }
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value
        .parse()
        .map_err(|_| Error::Parse(format!("key '{key}': '{value}' is not a non-negative integer")))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    let v: f64 = value
        .parse()
        .map_err(|_| Error::Parse(format!("key '{key}': '{value}' is not a number")))?;
    if !v.is_finite() {
        return Err(Error::Parse(format!("key '{key}': '{value}' is not finite")));
    }
    Ok(v)
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Parse(format!("key '{key}': '{value}' is not true/false"))),
    }
}
