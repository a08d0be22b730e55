//! JSON experiment configuration.
//!
//! ```json
//! {
//!   "dims": {"m": 32, "n": 32, "rank": 4},
//!   "num_tasks": 6,
//!   "samples_per_task": 100,
//!   "noise_sigma": 0.0,
//!   "train": {"eta": 0.001, "steps": 500, "batch_size": 16},
//!   "strategies": ["SLAO", "SeqLoRA"],
//!   "schedules": ["inverse_sqrt", "fixed:0.5"],
//!   "init_strategies": ["last_fine_tune"],
//!   "orders": [[0, 1, 2, 3, 4, 5]],
//!   "seeds": [0, 1, 2],
//!   "output_dir": "out"
//! }
//! ```
//!
//! Only `dims.m`, `dims.n` and `num_tasks` are required. `workers` is an
//! optional thread count for sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adapter::{InitStrategy, DEFAULT_INIT_SIGMA};
use crate::error::{Error, Result};
use crate::merge::{MergeStrategy, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    pub m: usize,
    pub n: usize,
    #[serde(default = "default_rank")]
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_eta")]
    pub eta: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_sigma")]
    pub init_sigma: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            eta: default_eta(),
            steps: default_steps(),
            batch_size: default_batch(),
            init_sigma: default_sigma(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dims: Dims,
    pub num_tasks: usize,
    #[serde(default = "default_samples")]
    pub samples_per_task: usize,
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default = "default_strategies")]
    pub strategies: Vec<String>,
    #[serde(default = "default_schedules")]
    pub schedules: Vec<String>,
    #[serde(default = "default_inits")]
    pub init_strategies: Vec<String>,
    /// Defaults to the single identity order.
    #[serde(default)]
    pub orders: Vec<Vec<usize>>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
}

fn default_rank() -> usize {
    8
}
fn default_eta() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    500
}
fn default_batch() -> usize {
    16
}
fn default_sigma() -> f64 {
    DEFAULT_INIT_SIGMA
}
fn default_samples() -> usize {
    100
}
fn default_strategies() -> Vec<String> {
    vec![MergeStrategy::Slao.name().to_string()]
}
fn default_schedules() -> Vec<String> {
    vec![Schedule::InverseSqrt.name()]
}
fn default_inits() -> Vec<String> {
    vec![InitStrategy::LastFineTune.name()]
}
fn default_seeds() -> Vec<u64> {
    vec![0]
}
fn default_output() -> PathBuf {
    PathBuf::from("out")
}

/// One cell of the sweep grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub index: usize,
    pub strategy: MergeStrategy,
    pub schedule: Schedule,
    pub init: InitStrategy,
    pub order_id: usize,
    pub order: Vec<usize>,
    pub seed: u64,
}

impl ExperimentConfig {
    /// Parses and validates a JSON document, filling defaults.
    pub fn from_json(text: &str, context: &str) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            context: context.to_string(),
            message: format!("line {} column {}: {e}", e.line(), e.column()),
        })?;
        if cfg.orders.is_empty() {
            cfg.orders = vec![(0..cfg.num_tasks).collect()];
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let Dims { m, n, rank } = self.dims;
        if m == 0 || n == 0 || rank == 0 {
            return Err(Error::Validation("dims must be positive".into()));
        }
        if rank > m.min(n) {
            return Err(Error::Validation(format!("rank {rank} exceeds min(m, n) = {}", m.min(n))));
        }
        if self.num_tasks == 0 {
            return Err(Error::Validation("num_tasks must be >= 1".into()));
        }
        if self.samples_per_task < 2 {
            return Err(Error::Validation("samples_per_task must be >= 2".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Validation("noise_sigma must be a nonnegative number".into()));
        }
        if !(self.train.eta > 0.0 && self.train.eta.is_finite()) {
            return Err(Error::Validation("train.eta must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Validation("train.batch_size must be >= 1".into()));
        }
        if !(self.train.init_sigma > 0.0) {
            return Err(Error::Validation("train.init_sigma must be positive".into()));
        }
        for (name, len) in [
            ("strategies", self.strategies.len()),
            ("schedules", self.schedules.len()),
            ("init_strategies", self.init_strategies.len()),
            ("orders", self.orders.len()),
            ("seeds", self.seeds.len()),
        ] {
            if len == 0 {
                return Err(Error::Validation(format!("{name} must not be empty")));
            }
        }
        for (k, order) in self.orders.iter().enumerate() {
            let mut seen = vec![false; self.num_tasks];
            let ok = order.len() == self.num_tasks
                && order.iter().all(|&t| t < self.num_tasks && !std::mem::replace(&mut seen[t], true));
            if !ok {
                return Err(Error::Validation(format!(
                    "order {k} {order:?} is not a permutation of 0..{}",
                    self.num_tasks
                )));
            }
        }
        if self.workers == Some(0) {
            return Err(Error::Validation("workers must be >= 1".into()));
        }
        self.parsed_strategies()?;
        self.parsed_schedules()?;
        self.parsed_inits()?;
        Ok(())
    }

    pub fn parsed_strategies(&self) -> Result<Vec<MergeStrategy>> {
        self.strategies.iter().map(|s| s.parse().map_err(to_validation)).collect()
    }

    pub fn parsed_schedules(&self) -> Result<Vec<Schedule>> {
        self.schedules.iter().map(|s| s.parse().map_err(to_validation)).collect()
    }

    pub fn parsed_inits(&self) -> Result<Vec<InitStrategy>> {
        self.init_strategies.iter().map(|s| s.parse().map_err(to_validation)).collect()
    }

    /// Every (strategy, schedule, init, order, seed) combination, in that
    /// nesting order.
    pub fn runs(&self) -> Result<Vec<RunSpec>> {
        let strategies = self.parsed_strategies()?;
        let schedules = self.parsed_schedules()?;
        let inits = self.parsed_inits()?;
        let mut runs = Vec::new();
        for &strategy in &strategies {
            for &schedule in &schedules {
                for &init in &inits {
                    for (order_id, order) in self.orders.iter().enumerate() {
                        for &seed in &self.seeds {
                            runs.push(RunSpec {
                                index: runs.len(),
                                strategy,
                                schedule,
                                init,
                                order_id,
                                order: order.clone(),
                                seed,
                            });
                        }
                    }
                }
            }
        }
        Ok(runs)
    }
}

fn to_validation(e: Error) -> Error {
    match e {
        Error::Parse { context, message } => Error::Validation(format!("{context}: {message}")),
        other => other,
    }
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ExperimentConfig::from_json(&text, &path.display().to_string())
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::write(path, cfg.to_json()).map_err(|e| Error::io(path, e))
}
