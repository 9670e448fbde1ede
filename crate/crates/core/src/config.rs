//! Flat `key = value` run configuration.
//!
//! Keys use the same kebab-case spelling as the command-line flags that
//! override them (underscores are accepted too). Resolution order is:
//! defaults, then the config file, then flags.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::contrastive::ContrastConfig;
use crate::error::{Error, Result};
use crate::graph::{split_list, RelationSchema};
use crate::model::{ChainScore, ModelConfig};
use crate::patterns::{GlobalNorm, LocalNorm};
use crate::training::TrainConfig;

/// Default output root when neither `output` nor this variable is set: `runs`.
pub const OUTPUT_ROOT_ENV: &str = "DCMGNN_OUTPUT_ROOT";

/// `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_key_values(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: format!("expected `key = value`, got `{line}`"),
        })?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::Parse {
                line: n + 1,
                message: "empty key".into(),
            });
        }
        out.push((key.to_string(), value.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub relations: Vec<String>,
    pub target: String,
    pub canonical_order: Option<Vec<String>>,
    pub chain_order: Option<Vec<String>>,
    pub split_ratio: f64,
    pub dim: usize,
    pub layers: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub tau: f64,
    pub mu_scale: f64,
    pub leaky_slope: f64,
    pub init_std: f64,
    pub seed: u64,
    pub eval_every: usize,
    pub patience: usize,
    pub probe_size: usize,
    pub ks: Vec<usize>,
    pub output: Option<PathBuf>,
    pub workers: usize,
    pub raw_local_adj: bool,
    pub separate_base: bool,
    pub global_norm: GlobalNorm,
    pub chain_score: ChainScore,
    pub per_user_weights: bool,
    pub csv: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = &t.model;
        RunConfig {
            dataset: None,
            relations: vec!["view".into(), "cart".into(), "buy".into()],
            target: "buy".into(),
            canonical_order: None,
            chain_order: None,
            split_ratio: 0.75,
            dim: m.dim,
            layers: m.layers,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            lambda: m.lambda,
            mu1: m.mu1,
            mu2: m.mu2,
            tau: m.contrast.tau,
            mu_scale: m.contrast.mu,
            leaky_slope: m.contrast.leaky_slope,
            init_std: m.init_std,
            seed: t.seed,
            eval_every: t.eval_every,
            patience: t.patience,
            probe_size: t.probe_size,
            ks: t.ks.clone(),
            output: None,
            workers: 1,
            raw_local_adj: false,
            separate_base: m.separate_base,
            global_norm: m.global_norm,
            chain_score: m.chain_score,
            per_user_weights: m.per_user_weights,
            csv: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse `{value}`: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got `{value}`"))),
    }
}

fn optional_list(value: &str) -> Option<Vec<String>> {
    let items = split_list(value);
    (!items.is_empty()).then_some(items)
}

fn join(items: &[impl ToString]) -> String {
    items.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub const KEYS: [&'static str; 31] = [
        "dataset",
        "relations",
        "target",
        "canonical-order",
        "chain-order",
        "split-ratio",
        "dim",
        "layers",
        "lr",
        "batch-size",
        "epochs",
        "lambda",
        "mu1",
        "mu2",
        "tau",
        "mu-scale",
        "leaky-slope",
        "init-std",
        "seed",
        "eval-every",
        "patience",
        "probe-size",
        "ks",
        "output",
        "workers",
        "raw-local-adj",
        "separate-base",
        "global-norm",
        "chain-score",
        "per-user-weights",
        "csv",
    ];

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply(&parse_key_values(&text)?)?;
        Ok(cfg)
    }

    pub fn apply(&mut self, pairs: &[(String, String)]) -> Result<()> {
        for (k, v) in pairs {
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('_', "-");
        let k = key.as_str();
        match k {
            "dataset" => self.dataset = (!value.is_empty()).then(|| PathBuf::from(value)),
            "relations" => self.relations = split_list(value),
            "target" => self.target = value.to_string(),
            "canonical-order" => self.canonical_order = optional_list(value),
            "chain-order" => self.chain_order = optional_list(value),
            "split-ratio" => self.split_ratio = parse(k, value)?,
            "dim" => self.dim = parse(k, value)?,
            "layers" => self.layers = parse(k, value)?,
            "lr" => self.lr = parse(k, value)?,
            "batch-size" => self.batch_size = parse(k, value)?,
            "epochs" => self.epochs = parse(k, value)?,
            "lambda" => self.lambda = parse(k, value)?,
            "mu1" => self.mu1 = parse(k, value)?,
            "mu2" => self.mu2 = parse(k, value)?,
            "tau" => self.tau = parse(k, value)?,
            "mu-scale" => self.mu_scale = parse(k, value)?,
            "leaky-slope" => self.leaky_slope = parse(k, value)?,
            "init-std" => self.init_std = parse(k, value)?,
            "seed" => self.seed = parse(k, value)?,
            "eval-every" => self.eval_every = parse(k, value)?,
            "patience" => self.patience = parse(k, value)?,
            "probe-size" => self.probe_size = parse(k, value)?,
            "ks" => {
                self.ks = split_list(value)
                    .iter()
                    .map(|s| parse(k, s))
                    .collect::<Result<Vec<usize>>>()?
            }
            "output" => self.output = (!value.is_empty()).then(|| PathBuf::from(value)),
            "workers" => self.workers = parse(k, value)?,
            "raw-local-adj" => self.raw_local_adj = parse_bool(k, value)?,
            "separate-base" => self.separate_base = parse_bool(k, value)?,
            "global-norm" => {
                self.global_norm = match value {
                    "row" => GlobalNorm::Row,
                    "symmetric" => GlobalNorm::Symmetric,
                    _ => return Err(Error::Config(format!("global-norm: expected row|symmetric, got `{value}`"))),
                }
            }
            "chain-score" => {
                self.chain_score = match value {
                    "last-step" => ChainScore::LastStep,
                    "aggregated" => ChainScore::Aggregated,
                    _ => {
                        return Err(Error::Config(format!(
                            "chain-score: expected last-step|aggregated, got `{value}`"
                        )))
                    }
                }
            }
            "per-user-weights" => self.per_user_weights = parse_bool(k, value)?,
            "csv" => self.csv = parse_bool(k, value)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Serialized in the same format [`RunConfig::from_file`] reads.
    pub fn to_key_values(&self) -> String {
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let opt_list = |l: &Option<Vec<String>>| l.as_ref().map(|l| join(l)).unwrap_or_default();
        let global_norm = match self.global_norm {
            GlobalNorm::Row => "row",
            GlobalNorm::Symmetric => "symmetric",
        };
        let chain_score = match self.chain_score {
            ChainScore::LastStep => "last-step",
            ChainScore::Aggregated => "aggregated",
        };
        let values: [String; 31] = [
            opt_path(&self.dataset),
            join(&self.relations),
            self.target.clone(),
            opt_list(&self.canonical_order),
            opt_list(&self.chain_order),
            self.split_ratio.to_string(),
            self.dim.to_string(),
            self.layers.to_string(),
            self.lr.to_string(),
            self.batch_size.to_string(),
            self.epochs.to_string(),
            self.lambda.to_string(),
            self.mu1.to_string(),
            self.mu2.to_string(),
            self.tau.to_string(),
            self.mu_scale.to_string(),
            self.leaky_slope.to_string(),
            self.init_std.to_string(),
            self.seed.to_string(),
            self.eval_every.to_string(),
            self.patience.to_string(),
            self.probe_size.to_string(),
            join(&self.ks),
            opt_path(&self.output),
            self.workers.to_string(),
            self.raw_local_adj.to_string(),
            self.separate_base.to_string(),
            global_norm.to_string(),
            chain_score.to_string(),
            self.per_user_weights.to_string(),
            self.csv.to_string(),
        ];
        let mut out = String::new();
        for (k, v) in Self::KEYS.iter().zip(values) {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    pub fn schema(&self) -> Result<RelationSchema> {
        RelationSchema::new(&self.relations, &self.target, self.canonical_order.as_deref())
    }

    /// Chain order as relation indices, if overridden.
    pub fn chain_order_indices(&self, schema: &RelationSchema) -> Result<Option<Vec<usize>>> {
        self.chain_order.as_ref().map(|names| schema.resolve_order(names)).transpose()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            lambda: self.lambda,
            mu1: self.mu1,
            mu2: self.mu2,
            contrast: ContrastConfig {
                tau: self.tau,
                mu: self.mu_scale,
                leaky_slope: self.leaky_slope,
            },
            local_norm: if self.raw_local_adj { LocalNorm::Raw } else { LocalNorm::Symmetric },
            global_norm: self.global_norm,
            separate_base: self.separate_base,
            chain_score: self.chain_score,
            per_user_weights: self.per_user_weights,
            init_std: self.init_std,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            model: self.model_config(),
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            eval_every: self.eval_every,
            patience: self.patience,
            seed: self.seed,
            ks: self.ks.clone(),
            probe_size: self.probe_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schema()?;
        self.train_config().validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Config(format!("split-ratio must lie in (0, 1), got {}", self.split_ratio)));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(())
    }

    /// `output`, else `$DCMGNN_OUTPUT_ROOT/seed-<seed>`, else `runs/seed-<seed>`.
    pub fn output_dir(&self) -> PathBuf {
        if let Some(p) = &self.output {
            return p.clone();
        }
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(format!("seed-{}", self.seed))
    }
}
