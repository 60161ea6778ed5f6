//! Flat `key = value` run configuration covering the model, training,
//! data generation and evaluation settings.

use std::fmt::Display;
use std::str::FromStr;

use crate::data::SynthConfig;
use crate::error::{Error, Result};
use crate::eval::ProtocolConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Parse one value, naming the key on failure.
pub fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("bad value `{value}` for `{key}`: {e}")))
}

/// Comma-separated list; an empty value is an empty list.
pub fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    let value = value.trim();
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse(key, v)).collect()
}

pub fn join_list<T: Display>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        other => Err(Error::Config(format!(
            "bad value `{other}` for `{key}`: expected true or false"
        ))),
    }
}

/// Split a config text into `(key, value)` pairs. Blank lines and `#`
/// comments are skipped; repeated keys are errors.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!(
                "line {}: expected `key = value`, got `{line}`",
                n + 1
            ))
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Config(format!("line {}: empty key", n + 1)));
        }
        if out.iter().any(|(seen, _)| seen == k) {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                n + 1
            )));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalConfig {
    pub protocol: ProtocolConfig,
    /// Fraction of identities held out when fitting the domain probe.
    pub probe_holdout: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            protocol: ProtocolConfig::default(),
            probe_holdout: 0.3,
        }
    }
}

impl EvalConfig {
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("eval.trials".into(), self.protocol.trials.to_string()),
            ("eval.max_rank".into(), self.protocol.max_rank.to_string()),
            ("eval.seed".into(), self.protocol.seed.to_string()),
            ("eval.probe_holdout".into(), self.probe_holdout.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "eval.trials" => self.protocol.trials = parse(key, value)?,
            "eval.max_rank" => self.protocol.max_rank = parse(key, value)?,
            "eval.seed" => self.protocol.seed = parse(key, value)?,
            "eval.probe_holdout" => self.probe_holdout = parse(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }
}

/// Everything one run needs, addressable as `model.*`, `train.*`, `data.*`
/// and `eval.*` keys.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SynthConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Defaults overridden by the keys of `text`.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_pairs(text)? {
            cfg.set(&k, &v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.split('.').next() {
            Some("model") => self.model.set(key, value),
            Some("train") => self.train.set(key, value),
            Some("data") => self.data.set(key, value),
            Some("eval") => self.eval.set(key, value),
            _ => Err(Error::Config(format!("unknown key `{key}`"))),
        }
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let mut out = self.model.to_pairs();
        out.extend(self.train.to_pairs());
        out.extend(self.data.to_pairs());
        out.extend(self.eval.to_pairs());
        out
    }

    /// Every key with its value, one per line.
    pub fn to_text(&self) -> String {
        self.to_pairs()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.model.input != self.data.mode {
            return Err(Error::Config(format!(
                "model input {:?} differs from data input {:?}",
                self.model.input, self.data.mode
            )));
        }
        let ids = self.data.train_domains * self.data.identities_per_domain;
        if self.model.identities != ids {
            return Err(Error::Config(format!(
                "model.identities = {} but the training domains hold {ids} identities",
                self.model.identities
            )));
        }
        if self.model.domains != self.data.train_domains {
            return Err(Error::Config(format!(
                "model.domains = {} but data.train_domains = {}",
                self.model.domains, self.data.train_domains
            )));
        }
        if self.train.p > ids {
            return Err(Error::Config(format!(
                "train.p = {} exceeds the {ids} training identities",
                self.train.p
            )));
        }
        if !(self.eval.probe_holdout > 0.0 && self.eval.probe_holdout < 1.0) {
            return Err(Error::Config(format!(
                "eval.probe_holdout {} outside (0, 1)",
                self.eval.probe_holdout
            )));
        }
        if self.eval.protocol.trials == 0 || self.eval.protocol.max_rank == 0 {
            return Err(Error::Config(
                "eval.trials and eval.max_rank must be positive".into(),
            ));
        }
        if self.eval.protocol.max_rank > self.data.heldout_identities {
            return Err(Error::Config(format!(
                "eval.max_rank {} exceeds the {} unseen identities",
                self.eval.protocol.max_rank, self.data.heldout_identities
            )));
        }
        Ok(())
    }
}

/// One row of the component ablation.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    pub config: RunConfig,
}

impl RunConfig {
    /// The five cumulative rows: identity loss only, then instance
    /// normalization, triplet loss, the adversarial auto-encoder and
    /// finally MMD alignment.
    pub fn ablation_rows(&self) -> Vec<AblationRow> {
        let in_blocks = if self.model.in_blocks > 0 {
            self.model.in_blocks
        } else {
            ModelConfig::default().in_blocks
        };
        let names = ["baseline", "+IN", "+triplet", "+AAE", "+MMD"];
        names
            .iter()
            .enumerate()
            .map(|(level, &name)| {
                let mut c = self.clone();
                c.model.in_blocks = if level >= 1 { in_blocks } else { 0 };
                c.train.components.triplet = level >= 2;
                c.train.components.aae = level >= 3;
                c.train.components.mmd = level >= 4;
                AblationRow { name, config: c }
            })
            .collect()
    }
}
