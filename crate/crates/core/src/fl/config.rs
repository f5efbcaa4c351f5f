use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::align::AggregationVariant;
use crate::error::{CflError, Result};
use crate::search::SearchStrategy;
use crate::supernet::{ChannelPolicy, SupernetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Latency-bounded personalised submodels, aligned and aggregated.
    Cfl,
    /// Every worker trains the full parent; plain data-size weighted averaging.
    UniformFl,
    /// Every worker trains its own copy alone.
    Independent,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Cfl => "cfl",
            Mode::UniformFl => "uniform-fl",
            Mode::Independent => "independent",
        })
    }
}

impl FromStr for Mode {
    type Err = CflError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cfl" => Ok(Mode::Cfl),
            "uniform-fl" => Ok(Mode::UniformFl),
            "independent" => Ok(Mode::Independent),
            _ => Err(CflError::Config(format!("unknown mode '{}' (cfl, uniform-fl, independent)", s))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QualityAssignment {
    /// Worker `k` gets level `k mod 5`.
    #[default]
    RoundRobin,
    /// Seeded uniform draw per worker.
    Random,
}

/// Everything a run depends on. Stored as a flat `key=value` file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: usize,
    pub workers: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mode: Mode,
    pub search_iterations: usize,
    pub search_strategy: SearchStrategy,
    /// How the search fills a chosen width with parent channels.
    pub channel_policy: ChannelPolicy,
    pub alpha: f64,
    pub bound_factor: f64,
    pub aggregation: AggregationVariant,
    pub imbalance: f64,
    pub speed_spread: f64,
    pub base_flops_per_ms: f64,
    pub quality_assignment: QualityAssignment,
    /// Training cost of one batch relative to inference latency.
    pub cost_multiplier: f64,
    pub holdout_fraction: f64,
    pub public_fraction: f64,
    pub pretrain_epochs: usize,
    pub warmup_epochs: usize,
    pub gate_lr: f64,
    pub predictor_lr: f64,
    pub predictor_threshold: f64,
    /// `toy` or `default` parent size.
    pub model: String,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Run the frozen gates during local training and evaluation in cfl mode.
    pub gated: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 30,
            workers: 8,
            local_epochs: 2,
            lr: 0.2,
            batch_size: 16,
            seed: 0,
            mode: Mode::Cfl,
            search_iterations: 20,
            search_strategy: SearchStrategy::Genetic,
            channel_policy: ChannelPolicy::Prefix,
            alpha: 0.1,
            bound_factor: 0.6,
            aggregation: AggregationVariant::Weighted,
            imbalance: 0.8,
            speed_spread: 4.0,
            base_flops_per_ms: 2e5,
            quality_assignment: QualityAssignment::RoundRobin,
            cost_multiplier: 3.0,
            holdout_fraction: 0.1,
            public_fraction: 0.02,
            pretrain_epochs: 5,
            warmup_epochs: 3,
            gate_lr: 0.5,
            predictor_lr: 0.003,
            predictor_threshold: 1e-3,
            model: "toy".into(),
            train_samples: 20000,
            test_samples: 1000,
            gated: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| CflError::Config(format!("bad value '{}' for {}", v, key)))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(CflError::Config(m));
        if self.rounds == 0 || self.workers == 0 || self.local_epochs == 0 {
            return fail("rounds, workers and local_epochs must be at least 1".into());
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 || self.search_iterations == 0 {
            return fail("batch_size and search_iterations must be at least 1".into());
        }
        if !(self.alpha >= 0.0) {
            return fail(format!("alpha must be >= 0, got {}", self.alpha));
        }
        if !(self.bound_factor > 0.0) {
            return fail(format!("bound_factor must be positive, got {}", self.bound_factor));
        }
        if !(self.imbalance > 0.0 && self.imbalance <= 1.0) {
            return fail(format!("imbalance must be in (0, 1], got {}", self.imbalance));
        }
        if !(self.speed_spread >= 1.0) || !(self.base_flops_per_ms > 0.0) {
            return fail("speed_spread must be >= 1 and base_flops_per_ms positive".into());
        }
        if !(self.cost_multiplier > 0.0) {
            return fail(format!("cost_multiplier must be positive, got {}", self.cost_multiplier));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return fail(format!("holdout_fraction must be in (0, 1), got {}", self.holdout_fraction));
        }
        if !(self.public_fraction > 0.0 && self.public_fraction < 1.0) {
            return fail(format!("public_fraction must be in (0, 1), got {}", self.public_fraction));
        }
        if self.warmup_epochs > self.pretrain_epochs {
            return fail("warmup_epochs cannot exceed pretrain_epochs".into());
        }
        if !(self.gate_lr >= 0.0) || !(self.predictor_lr > 0.0) || !(self.predictor_threshold > 0.0) {
            return fail("gate_lr must be >= 0, predictor_lr and predictor_threshold positive".into());
        }
        if self.train_samples == 0 || self.test_samples == 0 {
            return fail("train_samples and test_samples must be positive".into());
        }
        self.supernet()?;
        Ok(())
    }

    /// Parent shape named by `model`, before adapting to the data shape.
    pub fn supernet(&self) -> Result<SupernetConfig> {
        match self.model.as_str() {
            "toy" => Ok(SupernetConfig::toy()),
            "default" => Ok(SupernetConfig::default()),
            m => Err(CflError::Config(format!("unknown model '{}' (toy, default)", m))),
        }
    }

    /// Overrides one field from its text form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "rounds" => self.rounds = parse(key, v)?,
            "workers" => self.workers = parse(key, v)?,
            "local_epochs" => self.local_epochs = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "search_iterations" => self.search_iterations = parse(key, v)?,
            "search_strategy" => {
                self.search_strategy = match v {
                    "genetic" => SearchStrategy::Genetic,
                    "random" => SearchStrategy::Random,
                    _ => return Err(CflError::Config(format!("unknown search_strategy '{}'", v))),
                }
            }
            "channel_policy" => {
                self.channel_policy = match v {
                    "prefix" => ChannelPolicy::Prefix,
                    "random" => ChannelPolicy::Random,
                    _ => return Err(CflError::Config(format!("unknown channel_policy '{}'", v))),
                }
            }
            "alpha" => self.alpha = parse(key, v)?,
            "bound_factor" => self.bound_factor = parse(key, v)?,
            "aggregation" => {
                self.aggregation = match v {
                    "weighted" => AggregationVariant::Weighted,
                    "coverage" => AggregationVariant::CoverageNormalized,
                    _ => return Err(CflError::Config(format!("unknown aggregation '{}'", v))),
                }
            }
            "imbalance" => self.imbalance = parse(key, v)?,
            "speed_spread" => self.speed_spread = parse(key, v)?,
            "base_flops_per_ms" => self.base_flops_per_ms = parse(key, v)?,
            "quality_assignment" => {
                self.quality_assignment = match v {
                    "round-robin" => QualityAssignment::RoundRobin,
                    "random" => QualityAssignment::Random,
                    _ => return Err(CflError::Config(format!("unknown quality_assignment '{}'", v))),
                }
            }
            "cost_multiplier" => self.cost_multiplier = parse(key, v)?,
            "holdout_fraction" => self.holdout_fraction = parse(key, v)?,
            "public_fraction" => self.public_fraction = parse(key, v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse(key, v)?,
            "gate_lr" => self.gate_lr = parse(key, v)?,
            "predictor_lr" => self.predictor_lr = parse(key, v)?,
            "predictor_threshold" => self.predictor_threshold = parse(key, v)?,
            "model" => self.model = v.to_string(),
            "train_samples" => self.train_samples = parse(key, v)?,
            "test_samples" => self.test_samples = parse(key, v)?,
            "gated" => self.gated = parse(key, v)?,
            _ => return Err(CflError::Config(format!("unknown config key '{}'", key))),
        }
        Ok(())
    }

    /// Reads `key=value` lines over the defaults; `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CflError::Config(format!("line {}: expected key=value, got '{}'", n + 1, raw)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let strategy = match self.search_strategy {
            SearchStrategy::Genetic => "genetic",
            SearchStrategy::Random => "random",
        };
        let channels = match self.channel_policy {
            ChannelPolicy::Prefix => "prefix",
            ChannelPolicy::Random => "random",
        };
        let aggregation = match self.aggregation {
            AggregationVariant::Weighted => "weighted",
            AggregationVariant::CoverageNormalized => "coverage",
        };
        let assignment = match self.quality_assignment {
            QualityAssignment::RoundRobin => "round-robin",
            QualityAssignment::Random => "random",
        };
        let fields: Vec<(&str, String)> = vec![
            ("rounds", self.rounds.to_string()),
            ("workers", self.workers.to_string()),
            ("local_epochs", self.local_epochs.to_string()),
            ("lr", self.lr.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("search_iterations", self.search_iterations.to_string()),
            ("search_strategy", strategy.into()),
            ("channel_policy", channels.into()),
            ("alpha", self.alpha.to_string()),
            ("bound_factor", self.bound_factor.to_string()),
            ("aggregation", aggregation.into()),
            ("imbalance", self.imbalance.to_string()),
            ("speed_spread", self.speed_spread.to_string()),
            ("base_flops_per_ms", self.base_flops_per_ms.to_string()),
            ("quality_assignment", assignment.into()),
            ("cost_multiplier", self.cost_multiplier.to_string()),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("public_fraction", self.public_fraction.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("gate_lr", self.gate_lr.to_string()),
            ("predictor_lr", self.predictor_lr.to_string()),
            ("predictor_threshold", self.predictor_threshold.to_string()),
            ("model", self.model.clone()),
            ("train_samples", self.train_samples.to_string()),
            ("test_samples", self.test_samples.to_string()),
            ("gated", self.gated.to_string()),
        ];
        fields.into_iter().map(|(k, v)| format!("{}={}\n", k, v)).collect()
    }
}
