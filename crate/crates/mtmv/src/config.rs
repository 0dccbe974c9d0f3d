//! Flat key=value experiment configuration with strict unknown-key checking.
//!
//! One file (or any sequence of key/value pairs) covers the dataset path,
//! model shape, and every training knob. Precedence is: built-in default,
//! then config file, then explicit override — each `apply` call simply wins
//! over earlier values. `snapshot()` serializes the merged result with keys
//! sorted, and parsing a snapshot reproduces the config exactly.

use crate::data::Dataset;
use crate::gating::UnitMode;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: {reason}")]
    BadValue { key: String, value: String, reason: String },
    #[error("line {line}: expected key=value, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Model-shape settings that combine with a dataset into a full ModelConfig.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub block_depth: usize,
    pub dropout: f64,
    pub unit_mode: UnitMode,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            hidden_dim: 64,
            n_blocks: 4,
            block_depth: 2,
            dropout: 0.5,
            unit_mode: UnitMode::TaskView,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct ExperimentConfig {
    /// Path to the dataset manifest.
    pub data: Option<PathBuf>,
    pub model: ModelSettings,
    pub train: TrainConfig,
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl ExperimentConfig {
    /// Applies one key/value pair; later calls override earlier ones.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "data" => self.data = Some(PathBuf::from(value)),
            "hidden_dim" => self.model.hidden_dim = parse(key, value)?,
            "n_blocks" => self.model.n_blocks = parse(key, value)?,
            "block_depth" => self.model.block_depth = parse(key, value)?,
            "dropout" => self.model.dropout = parse(key, value)?,
            "unit_mode" => {
                self.model.unit_mode = UnitMode::parse(value).ok_or_else(|| ConfigError::BadValue {
                    key: key.to_string(),
                    value: value.to_string(),
                    reason: "expected task_view or view".to_string(),
                })?
            }
            "lambda" => self.train.lambda = parse(key, value)?,
            "mu" => self.train.mu = parse(key, value)?,
            "k_internal" => self.train.k_internal = parse(key, value)?,
            "margin" => self.train.margin = parse(key, value)?,
            "labeled_batch" => self.train.labeled_batch = parse(key, value)?,
            "unlabeled_batch" => self.train.unlabeled_batch = parse(key, value)?,
            "eval_batch" => self.train.eval_batch = parse(key, value)?,
            "lr" => self.train.adam.lr = parse(key, value)?,
            "beta1" => self.train.adam.beta1 = parse(key, value)?,
            "beta2" => self.train.adam.beta2 = parse(key, value)?,
            "eps" => self.train.adam.eps = parse(key, value)?,
            "weight_decay" => self.train.adam.weight_decay = parse(key, value)?,
            "tau0" => self.train.tau0 = parse(key, value)?,
            "tau_min" => self.train.tau_min = parse(key, value)?,
            "max_steps" => self.train.max_steps = parse(key, value)?,
            "eval_interval" => self.train.eval_interval = parse(key, value)?,
            "patience" => self.train.patience = parse(key, value)?,
            "seed" => self.train.seed = parse(key, value)?,
            "fragment_len" => self.train.fragment_len = parse(key, value)?,
            "unlabeled_ratio" => {
                self.train.unlabeled_ratio =
                    if value == "none" { None } else { Some(parse(key, value)?) }
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies every pair from a flat key=value file (# comments, blank lines).
    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        for (pair, line) in parse_pairs(&text)? {
            self.apply(&pair.0, &pair.1).map_err(|e| match e {
                ConfigError::UnknownKey(k) => {
                    ConfigError::UnknownKey(format!("{k} ({} line {line})", path.display()))
                }
                other => other,
            })?;
        }
        Ok(())
    }

    /// Every key with its merged value, sorted, one per line. Parsing the
    /// result back reproduces this config.
    pub fn snapshot(&self) -> String {
        let t = &self.train;
        let m = &self.model;
        let mut pairs = vec![
            ("block_depth".to_string(), m.block_depth.to_string()),
            ("beta1".to_string(), t.adam.beta1.to_string()),
            ("beta2".to_string(), t.adam.beta2.to_string()),
            ("dropout".to_string(), m.dropout.to_string()),
            ("eps".to_string(), t.adam.eps.to_string()),
            ("eval_batch".to_string(), t.eval_batch.to_string()),
            ("eval_interval".to_string(), t.eval_interval.to_string()),
            ("fragment_len".to_string(), t.fragment_len.to_string()),
            ("hidden_dim".to_string(), m.hidden_dim.to_string()),
            ("k_internal".to_string(), t.k_internal.to_string()),
            ("labeled_batch".to_string(), t.labeled_batch.to_string()),
            ("lambda".to_string(), t.lambda.to_string()),
            ("lr".to_string(), t.adam.lr.to_string()),
            ("margin".to_string(), t.margin.to_string()),
            ("max_steps".to_string(), t.max_steps.to_string()),
            ("mu".to_string(), t.mu.to_string()),
            ("n_blocks".to_string(), m.n_blocks.to_string()),
            ("patience".to_string(), t.patience.to_string()),
            ("seed".to_string(), t.seed.to_string()),
            ("tau0".to_string(), t.tau0.to_string()),
            ("tau_min".to_string(), t.tau_min.to_string()),
            ("unit_mode".to_string(), m.unit_mode.as_str().to_string()),
            ("unlabeled_batch".to_string(), t.unlabeled_batch.to_string()),
            ("unlabeled_ratio".to_string(), match t.unlabeled_ratio {
                Some(r) => r.to_string(),
                None => "none".to_string(),
            }),
            ("weight_decay".to_string(), t.adam.weight_decay.to_string()),
        ];
        if let Some(data) = &self.data {
            pairs.push(("data".to_string(), data.display().to_string()));
        }
        pairs.sort();
        let mut out = String::new();
        for (k, v) in pairs {
            out.push_str(&k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
        out
    }

    /// Checks the documented invariants before any expensive work.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, value: String, reason: &str| {
            Err(ConfigError::BadValue { key: key.into(), value, reason: reason.into() })
        };
        let m = &self.model;
        let t = &self.train;
        if m.hidden_dim == 0 || m.n_blocks == 0 || m.block_depth == 0 {
            return bad("hidden_dim/n_blocks/block_depth", "0".into(), "must be positive");
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return bad("dropout", m.dropout.to_string(), "must be in [0, 1)");
        }
        if t.lambda < 0.0 {
            return bad("lambda", t.lambda.to_string(), "must be nonnegative");
        }
        if t.mu < 0.0 {
            return bad("mu", t.mu.to_string(), "must be nonnegative");
        }
        if t.k_internal == 0 {
            return bad("k_internal", "0".into(), "must be at least 1");
        }
        if t.margin <= 0.0 {
            return bad("margin", t.margin.to_string(), "must be positive");
        }
        if t.labeled_batch == 0 || t.unlabeled_batch == 0 || t.eval_batch == 0 {
            return bad("labeled_batch/unlabeled_batch/eval_batch", "0".into(), "must be positive");
        }
        if t.max_steps == 0 || t.eval_interval == 0 {
            return bad("max_steps/eval_interval", "0".into(), "must be positive");
        }
        if t.patience == 0 {
            return bad("patience", "0".into(), "must be at least 1");
        }
        if t.fragment_len < 2 {
            return bad("fragment_len", t.fragment_len.to_string(), "must be at least 2");
        }
        if t.tau0 <= 0.0 || t.tau_min <= 0.0 || t.tau_min > t.tau0 {
            return bad("tau0/tau_min", format!("{}/{}", t.tau0, t.tau_min), "need tau0 ≥ tau_min > 0");
        }
        if let Some(r) = t.unlabeled_ratio {
            if r <= 0.0 {
                return bad("unlabeled_ratio", r.to_string(), "must be positive or none");
            }
        }
        Ok(())
    }

    /// Full model config for a loaded dataset.
    pub fn model_config(&self, dataset: &Dataset) -> ModelConfig {
        let mut cfg = ModelConfig::new(dataset.view_dims(), dataset.n_classes());
        cfg.hidden_dim = self.model.hidden_dim;
        cfg.n_blocks = self.model.n_blocks;
        cfg.block_depth = self.model.block_depth;
        cfg.dropout = self.model.dropout;
        cfg.unit_mode = self.model.unit_mode;
        cfg.validate();
        cfg
    }
}

/// Splits flat config text into (key, value) pairs with their line numbers.
pub fn parse_pairs(text: &str) -> Result<Vec<((String, String), usize)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::BadLine { line: i + 1, text: raw.to_string() })?;
        out.push(((key.trim().to_string(), value.trim().to_string()), i + 1));
    }
    Ok(out)
}
