//! Flat `key = value` run configuration.
//!
//! ```text
//! # comment
//! world.bias_beta = 0.85
//! world.templates = other:0, yesno:0, num:0
//! model.question_encoder = gru
//! loss.alpha = 3
//! train.finetune_epochs = 15
//! ```
//!
//! Keys carry a section prefix (`world.`, `model.`, `loss.`, `train.`,
//! `eval.`). Unknown keys and repeated keys are errors. [`RunConfig::echo`]
//! writes every key in a fixed order, so the echo of an echo is identical.

use std::collections::BTreeSet;
use std::fmt::{self, Display, Write as _};
use std::path::Path;
use std::str::FromStr;

use ssl_vqa_core::data::{standard_templates, QType, QuestionTemplate, WorldSpec};
use ssl_vqa_core::eval::ProbeConfig;
use ssl_vqa_core::losses::LossConfig;
use ssl_vqa_core::model::ModelSpec;
use ssl_vqa_core::trainer::TrainConfig;

/// Bad configuration text or override; reported as a usage error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub origin: String,
    pub line: Option<usize>,
    pub msg: String,
}

impl Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(l) => write!(f, "{}:{l}: {}", self.origin, self.msg),
            None => write!(f, "{}: {}", self.origin, self.msg),
        }
    }
}

impl std::error::Error for ConfigError {}

/// Prior-probe settings.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EvalSettings {
    pub probe_seed: u64,
    /// 0 probes one pair per instance.
    pub probe_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub model: ModelSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

fn parse<T: FromStr>(v: &str) -> Result<T, String>
where
    T::Err: Display,
{
    v.parse::<T>().map_err(|e| format!("`{v}`: {e}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    v.split(',').map(|x| parse(x.trim())).collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_templates(v: &str) -> Result<Vec<QuestionTemplate>, String> {
    v.split(',')
        .map(|t| {
            let t = t.trim();
            let (q, a) = t
                .split_once(':')
                .ok_or_else(|| format!("template `{t}` is not <qtype>:<attribute>"))?;
            Ok(QuestionTemplate::standard(parse::<QType>(q)?, parse(a)?))
        })
        .collect()
}

fn format_templates(ts: &[QuestionTemplate]) -> Result<String, String> {
    let mut parts = Vec::new();
    for t in ts {
        if *t != QuestionTemplate::standard(t.qtype, t.queried_attribute) {
            return Err(format!(
                "template {t:?} has custom wording, which this format cannot express"
            ));
        }
        parts.push(format!("{}:{}", t.qtype, t.queried_attribute));
    }
    Ok(parts.join(","))
}

impl RunConfig {
    /// Every key, in echo order.
    pub fn keys() -> Vec<&'static str> {
        RunConfig::default()
            .entries()
            .expect("defaults are expressible")
            .into_iter()
            .map(|(k, _)| k)
            .collect()
    }

    /// `(key, value)` for every setting.
    pub fn entries(&self) -> Result<Vec<(&'static str, String)>, String> {
        let w = &self.world;
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        Ok(vec![
            ("world.n_attributes", w.n_attributes.to_string()),
            ("world.values_per_attribute", join(&w.values_per_attribute)),
            ("world.n_objects_range", join(&w.n_objects_range)),
            ("world.object_slots", w.object_slots.to_string()),
            ("world.feature_dim", w.feature_dim.to_string()),
            ("world.noise_sigma", w.noise_sigma.to_string()),
            ("world.templates", format_templates(&w.templates)?),
            ("world.train_size", w.train_size.to_string()),
            ("world.test_size", w.test_size.to_string()),
            ("world.bias_beta", w.bias_beta.to_string()),
            ("world.shift_mode", w.shift_mode.to_string()),
            ("world.vote_count", w.vote_count.to_string()),
            ("world.pad_len", w.pad_len.to_string()),
            ("world.seed", w.seed.to_string()),
            ("model.embed_dim", m.embed_dim.to_string()),
            ("model.hidden_dim", m.hidden_dim.to_string()),
            ("model.question_encoder", m.question_encoder.to_string()),
            ("model.use_batchnorm", m.use_batchnorm.to_string()),
            ("model.init_scale", m.init_scale.to_string()),
            ("model.seed", m.seed.to_string()),
            ("loss.head", l.head.to_string()),
            ("loss.alpha", l.alpha.to_string()),
            ("loss.log_clamp", l.log_clamp.to_string()),
            ("loss.confidence", l.confidence.to_string()),
            ("train.pretrain_epochs", t.pretrain_epochs.to_string()),
            ("train.finetune_epochs", t.finetune_epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.base_lr", t.base_lr.to_string()),
            ("train.lr_halving_start", t.lr_halving_start.to_string()),
            ("train.lr_halving_period", t.lr_halving_period.to_string()),
            ("train.seed", t.seed.to_string()),
            ("train.shuffle", t.shuffle.to_string()),
            ("train.pair_mode", t.pair_mode.to_string()),
            ("eval.probe_seed", self.eval.probe_seed.to_string()),
            ("eval.probe_pairs", self.eval.probe_pairs.to_string()),
        ])
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), String> {
        let w = &mut self.world;
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        match key {
            "world.n_attributes" => w.n_attributes = parse(v)?,
            "world.values_per_attribute" => w.values_per_attribute = parse_list(v)?,
            "world.n_objects_range" => {
                let r: Vec<usize> = parse_list(v)?;
                w.n_objects_range = r.try_into().map_err(|_| format!("`{v}`: expected <min>,<max>"))?;
            }
            "world.object_slots" => w.object_slots = parse(v)?,
            "world.feature_dim" => w.feature_dim = parse(v)?,
            "world.noise_sigma" => w.noise_sigma = parse(v)?,
            "world.templates" => w.templates = parse_templates(v)?,
            "world.train_size" => w.train_size = parse(v)?,
            "world.test_size" => w.test_size = parse(v)?,
            "world.bias_beta" => w.bias_beta = parse(v)?,
            "world.shift_mode" => w.shift_mode = parse(v)?,
            "world.vote_count" => w.vote_count = parse(v)?,
            "world.pad_len" => w.pad_len = parse(v)?,
            "world.seed" => w.seed = parse(v)?,
            "model.embed_dim" => m.embed_dim = parse(v)?,
            "model.hidden_dim" => m.hidden_dim = parse(v)?,
            "model.question_encoder" => m.question_encoder = parse(v)?,
            "model.use_batchnorm" => m.use_batchnorm = parse(v)?,
            "model.init_scale" => m.init_scale = parse(v)?,
            "model.seed" => m.seed = parse(v)?,
            "loss.head" => l.head = parse(v)?,
            "loss.alpha" => l.alpha = parse(v)?,
            "loss.log_clamp" => l.log_clamp = parse(v)?,
            "loss.confidence" => l.confidence = parse(v)?,
            "train.pretrain_epochs" => t.pretrain_epochs = parse(v)?,
            "train.finetune_epochs" => t.finetune_epochs = parse(v)?,
            "train.batch_size" => t.batch_size = parse(v)?,
            "train.base_lr" => t.base_lr = parse(v)?,
            "train.lr_halving_start" => t.lr_halving_start = parse(v)?,
            "train.lr_halving_period" => t.lr_halving_period = parse(v)?,
            "train.seed" => t.seed = parse(v)?,
            "train.shuffle" => t.shuffle = parse(v)?,
            "train.pair_mode" => t.pair_mode = parse(v)?,
            "eval.probe_seed" => self.eval.probe_seed = parse(v)?,
            "eval.probe_pairs" => self.eval.probe_pairs = parse(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text. Attribute-shaped world settings that are not
    /// given follow `world.n_attributes`.
    pub fn parse(text: &str, origin: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = BTreeSet::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |msg: String| ConfigError {
                origin: origin.to_string(),
                line: Some(i + 1),
                msg,
            };
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if !seen.insert(k.to_string()) {
                return Err(err(format!("key `{k}` given twice")));
            }
            cfg.set(k, v).map_err(|m| err(format!("{k}: {m}")))?;
        }
        cfg.fill_attribute_defaults(&seen);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError {
            origin: path.display().to_string(),
            line: None,
            msg: e.to_string(),
        })?;
        RunConfig::parse(&text, &path.display().to_string())
    }

    fn fill_attribute_defaults(&mut self, seen: &BTreeSet<String>) {
        if !seen.contains("world.n_attributes") {
            return;
        }
        let n = self.world.n_attributes;
        if !seen.contains("world.values_per_attribute") {
            self.world.values_per_attribute = vec![4; n];
        }
        if !seen.contains("world.templates") {
            self.world.templates = standard_templates(n);
        }
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), ConfigError> {
        let mut seen = BTreeSet::new();
        for s in sets {
            let err = |msg: String| ConfigError {
                origin: "--set".into(),
                line: None,
                msg,
            };
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, got `{s}`")))?;
            self.set(k.trim(), v.trim())
                .map_err(|m| err(format!("{}: {m}", k.trim())))?;
            seen.insert(k.trim().to_string());
        }
        self.fill_attribute_defaults(&seen);
        Ok(())
    }

    /// Canonical text form; parses back to an equal config.
    pub fn echo(&self) -> Result<String, String> {
        let mut out = String::new();
        for (k, v) in self.entries()? {
            writeln!(out, "{k} = {v}").unwrap();
        }
        Ok(out)
    }

    pub fn probe(&self) -> ProbeConfig {
        ProbeConfig {
            head: self.loss.head,
            rule: self.loss.confidence,
            seed: self.eval.probe_seed,
            n_pairs: (self.eval.probe_pairs > 0).then_some(self.eval.probe_pairs),
        }
    }
}
