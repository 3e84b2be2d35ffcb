//! Experiment configuration.
//!
//! Config files are flat `key = value` text: one assignment per line, `#`
//! starts a comment, keys are dotted paths, list values are comma-separated.
//! Unknown keys are rejected so typos fail loudly. Every key has a default
//! (the desk-scale benchmark), so an empty file is a valid config.
//!
//! ```text
//! seed = 1
//! n_grid = 100,1000,10000
//! methods = ips, dr, safe_dr:0.95, prpo:inv_n:100
//! bias.alpha = 0.35,0.53,0.55,0.54,0.52
//! bias.beta = 0.65,0.26,0.15,0.11,0.08
//! train.init = logging
//! ```
//!
//! Method grammar: `ips`, `dr`, `safe_ips:<delta>`, `safe_dr:<delta>`,
//! `prpo:const:<c>`, `prpo:inv_n:<c>`, `prpo:inv_log_n`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use cltr_core::policy::ScorerKind;
use cltr_core::safety::ClipSchedule;
use cltr_core::simulate::BiasParams;
use cltr_core::{CltrError, Result};
use serde::{Deserialize, Serialize};

/// Where the datasets come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum DataSource {
    Synthetic(cltr_core::data::SyntheticConfig),
    Files { train: PathBuf, validation: PathBuf, test: PathBuf },
}

/// How the logging policy is obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LoggingSource {
    /// Train a production ranker on a label fraction of the train split.
    TrainFraction(f64),
    Load(PathBuf),
}

/// Initial policy for click-based training runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitPolicy {
    /// Safety-constrained objectives (safe-IPS, safe-DR, PRPO) warm-start
    /// from the logging policy they are anchored to; unconstrained
    /// estimators (IPS, DR) train from scratch.
    Auto,
    /// Warm-start every method from the logging policy.
    Logging,
    /// Zero scorer parameters (near-uniform PL policy) for every method.
    Zeros,
}

/// One method column of the sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MethodKind {
    Ips,
    Dr,
    SafeIps { delta: f64 },
    SafeDr { delta: f64 },
    Prpo { schedule: ClipSchedule },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSpec {
    pub name: String,
    pub kind: MethodKind,
}

impl MethodSpec {
    /// Parse the `methods` list grammar.
    pub fn parse(token: &str) -> Result<MethodSpec> {
        let parts: Vec<&str> = token.split(':').map(str::trim).collect();
        let bad = || CltrError::Config(format!("unknown method spec {token:?}"));
        let kind = match parts.as_slice() {
            ["ips"] => MethodKind::Ips,
            ["dr"] => MethodKind::Dr,
            ["safe_ips", d] => MethodKind::SafeIps { delta: d.parse().map_err(|_| bad())? },
            ["safe_dr", d] => MethodKind::SafeDr { delta: d.parse().map_err(|_| bad())? },
            ["prpo", "const", c] => {
                MethodKind::Prpo { schedule: ClipSchedule::Constant(c.parse().map_err(|_| bad())?) }
            }
            ["prpo", "inv_n", c] => {
                MethodKind::Prpo { schedule: ClipSchedule::InverseN(c.parse().map_err(|_| bad())?) }
            }
            ["prpo", "inv_log_n"] => MethodKind::Prpo { schedule: ClipSchedule::InverseLogN },
            _ => return Err(bad()),
        };
        Ok(MethodSpec { name: canonical_name(&kind), kind })
    }
}

fn canonical_name(kind: &MethodKind) -> String {
    match kind {
        MethodKind::Ips => "ips".into(),
        MethodKind::Dr => "dr".into(),
        MethodKind::SafeIps { delta } => format!("safe_ips_{delta}"),
        MethodKind::SafeDr { delta } => format!("safe_dr_{delta}"),
        MethodKind::Prpo { schedule: ClipSchedule::Constant(c) } => format!("prpo_const_{c}"),
        MethodKind::Prpo { schedule: ClipSchedule::InverseN(c) } => format!("prpo_inv_n_{c}"),
        MethodKind::Prpo { schedule: ClipSchedule::InverseLogN } => "prpo_inv_log_n".into(),
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.name)
    }
}

/// Training hyperparameters shared by all sweep cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub init: InitPolicy,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_queries: usize,
    pub mc_samples: usize,
    pub momentum: f64,
    /// Track the divergence penalty without differentiating it.
    pub detached_penalty: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub source: DataSource,
    pub normalize: bool,
    pub bias: BiasParams,
    pub adversarial: bool,
    pub top_k: usize,
    pub temperature: f64,
    pub scorer_kind: ScorerKind,
    pub hidden_dim: usize,
    pub logging: LoggingSource,
    pub logging_learning_rate: f64,
    pub logging_epochs: usize,
    pub n_grid: Vec<usize>,
    pub methods: Vec<MethodSpec>,
    pub n_runs: usize,
    pub validation_fraction: f64,
    pub train: TrainSettings,
    pub eval_k: usize,
    pub eval_mc_samples: usize,
    pub seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    /// The desk-scale benchmark: 200 synthetic queries, K = 5, the standard
    /// trust-bias vectors, N from 1e2 to 1e6, 10 runs per cell.
    fn default() -> Self {
        ExperimentConfig {
            source: DataSource::Synthetic(cltr_core::data::SyntheticConfig {
                docs_per_query: 12,
                ..cltr_core::data::SyntheticConfig::default()
            }),
            normalize: false,
            bias: BiasParams::default_trust(),
            adversarial: false,
            top_k: 5,
            temperature: 1.0,
            scorer_kind: ScorerKind::Linear,
            hidden_dim: 32,
            logging: LoggingSource::TrainFraction(0.03),
            logging_learning_rate: 0.15,
            logging_epochs: 300,
            n_grid: vec![100, 1_000, 10_000, 100_000, 1_000_000],
            methods: vec![
                MethodSpec::parse("ips").unwrap(),
                MethodSpec::parse("dr").unwrap(),
                MethodSpec::parse("safe_dr:0.95").unwrap(),
                MethodSpec::parse("prpo:inv_n:100").unwrap(),
            ],
            n_runs: 10,
            validation_fraction: 0.15,
            train: TrainSettings {
                init: InitPolicy::Auto,
                learning_rate: 0.25,
                max_epochs: 300,
                patience: 25,
                batch_queries: 32,
                mc_samples: 32,
                momentum: 0.0,
                detached_penalty: false,
            },
            eval_k: 5,
            eval_mc_samples: 100,
            seed: 1,
            workers: 1,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file<P: AsRef<Path>>(path: P) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::from_str_content(&text)
    }

    pub fn from_str_content(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut pairs: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (no, line) in text.lines().enumerate() {
            let line = match line.split_once('#') {
                Some((before, _)) => before,
                None => line,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CltrError::Parse {
                    line: no + 1,
                    message: format!("expected key = value, got {line:?}"),
                });
            };
            pairs.insert(key.trim().to_string(), (no + 1, value.trim().to_string()));
        }
        cfg.apply_pairs(pairs)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply_pairs(&mut self, pairs: BTreeMap<String, (usize, String)>) -> Result<()> {
        let mut synthetic = match &self.source {
            DataSource::Synthetic(s) => s.clone(),
            _ => cltr_core::data::SyntheticConfig::default(),
        };
        let mut files: (Option<PathBuf>, Option<PathBuf>, Option<PathBuf>) = (None, None, None);
        let mut use_files = false;
        let mut logging_path: Option<PathBuf> = None;
        let mut alpha: Option<Vec<f64>> = None;
        let mut beta: Option<Vec<f64>> = None;

        for (key, (line, value)) in pairs {
            let err = |message: String| CltrError::Parse { line, message };
            macro_rules! set {
                ($target:expr, $ty:ty) => {
                    $target = value
                        .parse::<$ty>()
                        .map_err(|_| err(format!("bad value {value:?} for {key}")))?
                };
            }
            match key.as_str() {
                "seed" => set!(self.seed, u64),
                "workers" => set!(self.workers, usize),
                "n_runs" => set!(self.n_runs, usize),
                "adversarial" => set!(self.adversarial, bool),
                "top_k" => set!(self.top_k, usize),
                "temperature" => set!(self.temperature, f64),
                "validation_fraction" => set!(self.validation_fraction, f64),
                "n_grid" => {
                    self.n_grid = parse_list(&value)
                        .map_err(|m| err(format!("{m} in n_grid")))?;
                }
                "methods" => {
                    self.methods = value
                        .split(',')
                        .map(|t| MethodSpec::parse(t.trim()))
                        .collect::<Result<_>>()?;
                }
                "bias.alpha" => {
                    alpha =
                        Some(parse_list(&value).map_err(|m| err(format!("{m} in bias.alpha")))?);
                }
                "bias.beta" => {
                    beta =
                        Some(parse_list(&value).map_err(|m| err(format!("{m} in bias.beta")))?);
                }
                "dataset.source" => match value.as_str() {
                    "synthetic" => use_files = false,
                    "files" => use_files = true,
                    other => return Err(err(format!("unknown dataset.source {other:?}"))),
                },
                "dataset.normalize" => set!(self.normalize, bool),
                "dataset.train" => files.0 = Some(PathBuf::from(&value)),
                "dataset.validation" => files.1 = Some(PathBuf::from(&value)),
                "dataset.test" => files.2 = Some(PathBuf::from(&value)),
                "dataset.synthetic.train_queries" => set!(synthetic.train_queries, usize),
                "dataset.synthetic.validation_queries" => {
                    set!(synthetic.validation_queries, usize)
                }
                "dataset.synthetic.test_queries" => set!(synthetic.test_queries, usize),
                "dataset.synthetic.docs_per_query" => set!(synthetic.docs_per_query, usize),
                "dataset.synthetic.feature_dim" => set!(synthetic.feature_dim, usize),
                "dataset.synthetic.latent_noise" => set!(synthetic.latent_noise, f64),
                "dataset.synthetic.seed" => set!(synthetic.seed, u64),
                "logging.mode" => match value.as_str() {
                    "train_fraction" => {}
                    "load" => {}
                    other => return Err(err(format!("unknown logging.mode {other:?}"))),
                },
                "logging.fraction" => {
                    let f: f64 =
                        value.parse().map_err(|_| err("bad logging.fraction".into()))?;
                    self.logging = LoggingSource::TrainFraction(f);
                }
                "logging.path" => logging_path = Some(PathBuf::from(&value)),
                "logging.learning_rate" => set!(self.logging_learning_rate, f64),
                "logging.epochs" => set!(self.logging_epochs, usize),
                "train.init" => match value.as_str() {
                    "auto" => self.train.init = InitPolicy::Auto,
                    "logging" => self.train.init = InitPolicy::Logging,
                    "zeros" => self.train.init = InitPolicy::Zeros,
                    other => return Err(err(format!("unknown train.init {other:?}"))),
                },
                "train.learning_rate" => set!(self.train.learning_rate, f64),
                "train.max_epochs" => set!(self.train.max_epochs, usize),
                "train.patience" => set!(self.train.patience, usize),
                "train.batch_queries" => set!(self.train.batch_queries, usize),
                "train.mc_samples" => set!(self.train.mc_samples, usize),
                "train.momentum" => set!(self.train.momentum, f64),
                "train.detached_penalty" => set!(self.train.detached_penalty, bool),
                "scorer.kind" => match value.as_str() {
                    "linear" => self.scorer_kind = ScorerKind::Linear,
                    "two_layer" => self.scorer_kind = ScorerKind::TwoLayer,
                    other => return Err(err(format!("unknown scorer.kind {other:?}"))),
                },
                "scorer.hidden_dim" => set!(self.hidden_dim, usize),
                "eval.k" => set!(self.eval_k, usize),
                "eval.mc_samples" => set!(self.eval_mc_samples, usize),
                _ => return Err(err(format!("unknown config key {key:?}"))),
            }
        }

        self.source = if use_files {
            match files {
                (Some(train), Some(validation), Some(test)) => {
                    DataSource::Files { train, validation, test }
                }
                _ => {
                    return Err(CltrError::Config(
                        "dataset.source = files needs dataset.train/validation/test".into(),
                    ))
                }
            }
        } else {
            DataSource::Synthetic(synthetic)
        };
        if let Some(path) = logging_path {
            self.logging = LoggingSource::Load(path);
        }
        if alpha.is_some() || beta.is_some() {
            self.bias = BiasParams::new(
                alpha.unwrap_or_else(|| self.bias.alpha().to_vec()),
                beta.unwrap_or_else(|| self.bias.beta().to_vec()),
            )?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 1 {
            return Err(CltrError::Config("n_runs must be >= 1".into()));
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CltrError::Config("n_grid must be strictly increasing".into()));
        }
        if self.methods.is_empty() {
            return Err(CltrError::Config("methods must not be empty".into()));
        }
        if self.validation_fraction.is_nan() || self.validation_fraction <= 0.0 {
            return Err(CltrError::Config("validation_fraction must be positive".into()));
        }
        if self.top_k == 0 || self.top_k > self.bias.k() {
            return Err(CltrError::Config(format!(
                "top_k {} must be in 1..={}",
                self.top_k,
                self.bias.k()
            )));
        }
        if self.workers == 0 {
            return Err(CltrError::Config("workers must be >= 1".into()));
        }
        Ok(())
    }
}

fn parse_list<T: std::str::FromStr>(value: &str) -> std::result::Result<Vec<T>, String> {
    value
        .split(',')
        .map(|t| t.trim().parse::<T>().map_err(|_| format!("bad list item {t:?}")))
        .collect()
}
