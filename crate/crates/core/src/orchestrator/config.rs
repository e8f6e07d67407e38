//! Run configuration: strategy, protocol constants, seeds, dataset source.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::SplitMode;
use crate::nn::{arch, ModelSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("gamma must satisfy 0 < gamma <= 1, got {0}")]
    BadGamma(f64),
    #[error("rho must satisfy 0 < rho < 1 for fedcmd, got {0}")]
    BadRho(f64),
    #[error("rounds must be >= 1")]
    BadRounds,
    #[error("local_epochs must be in [1, 10000)")]
    BadEpochs,
    #[error("batch_size must be >= 1")]
    BadBatch,
    #[error("lr must be finite and non-negative, got {0}")]
    BadLr(f64),
    #[error("num_clients must be >= 1")]
    BadClients,
    #[error("alpha must be positive, got {0}")]
    BadAlpha(f64),
    #[error("epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("eval_every must be >= 1")]
    BadEvalEvery,
    #[error("selection phase would run {kp} of {k} rounds; need 1 <= K_p <= K-1 (adjust rho)")]
    BadSelectionRounds { kp: u32, k: u32 },
    #[error("unknown strategy `{0}`; expected fedcmd | fedavg | local-only | fixed-head")]
    UnknownStrategy(String),
    #[error("unknown model `{0}`; expected lenet5 | lenet5-ext1 | lenet5-ext2 | dense[-H]...")]
    UnknownModel(String),
    #[error("model `{model}` cannot consume dataset input shape {shape:?}: {reason}")]
    ModelDatasetMismatch {
        model: String,
        shape: Vec<usize>,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "fedcmd")]
    FedCmd,
    #[serde(rename = "fedavg")]
    FedAvg,
    #[serde(rename = "local-only")]
    LocalOnly,
    #[serde(rename = "fixed-head")]
    FixedHead,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::FedCmd => "fedcmd",
            Strategy::FedAvg => "fedavg",
            Strategy::LocalOnly => "local-only",
            Strategy::FixedHead => "fixed-head",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fedcmd" => Ok(Strategy::FedCmd),
            "fedavg" => Ok(Strategy::FedAvg),
            "local-only" => Ok(Strategy::LocalOnly),
            "fixed-head" => Ok(Strategy::FixedHead),
            other => Err(ConfigError::UnknownStrategy(other.to_string())),
        }
    }
}

/// Seed triple; see [`crate::seeds`] for the fan-out scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    #[serde(default = "default_master")]
    pub master: u64,
    #[serde(default = "default_data")]
    pub data: u64,
    #[serde(default = "default_sampling")]
    pub sampling: u64,
}

fn default_master() -> u64 {
    1
}
fn default_data() -> u64 {
    2
}
fn default_sampling() -> u64 {
    3
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            master: default_master(),
            data: default_data(),
            sampling: default_sampling(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AggregationCfg {
    #[serde(default)]
    pub split_mode: SplitMode,
}

/// Synthetic Gaussian-blob dataset parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticCfg {
    pub classes: usize,
    pub samples_per_class: usize,
    pub input_shape: Vec<usize>,
    pub separation: f64,
}

/// IDX file pair (images + labels).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxCfg {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticCfg),
    Idx(IdxCfg),
}

impl DatasetSource {
    /// Identity used to reject cross-dataset report comparisons.
    pub fn descriptor(&self) -> String {
        match self {
            DatasetSource::Synthetic(c) => format!(
                "synthetic:{}x{}:{:?}:{}",
                c.classes, c.samples_per_class, c.input_shape, c.separation
            ),
            DatasetSource::Idx(c) => {
                format!("idx:{}:{}", c.images.display(), c.labels.display())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputCfg {
    #[serde(default = "default_out_dir")]
    pub dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl Default for OutputCfg {
    fn default() -> Self {
        OutputCfg {
            dir: default_out_dir(),
        }
    }
}

/// Full experiment description. Defaults follow the reference protocol:
/// K=200 rounds, E=5 local epochs, batch 32, lr 0.01, gamma 0.1, rho 0.1,
/// epsilon 1e-8, 100 clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    /// Total communication rounds K.
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    /// Fraction of rounds spent in the selection phase (fedcmd only).
    #[serde(default = "default_rho")]
    pub rho: f64,
    /// Fraction of clients sampled each round.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Local epochs E per sampled client per round.
    #[serde(default = "default_epochs")]
    pub local_epochs: u32,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clients")]
    pub num_clients: usize,
    /// Dirichlet concentration of the non-IID partition.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Cosine-similarity guard.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Evaluate all clients every this many rounds (plus the final round).
    #[serde(default = "default_eval_every")]
    pub eval_every: u32,
    /// Model spec id: lenet5 | lenet5-ext1 | lenet5-ext2 | dense-H1-H2-...
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub seeds: Seeds,
    #[serde(default)]
    pub aggregation: AggregationCfg,
    pub dataset: DatasetSource,
    #[serde(default)]
    pub output: OutputCfg,
}

fn default_strategy() -> Strategy {
    Strategy::FedCmd
}
fn default_rounds() -> u32 {
    200
}
fn default_rho() -> f64 {
    0.1
}
fn default_gamma() -> f64 {
    0.1
}
fn default_epochs() -> u32 {
    5
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.01
}
fn default_clients() -> usize {
    100
}
fn default_alpha() -> f64 {
    0.1
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_eval_every() -> u32 {
    5
}
fn default_model() -> String {
    "lenet5".to_string()
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(ConfigError::BadGamma(self.gamma));
        }
        if self.rounds < 1 {
            return Err(ConfigError::BadRounds);
        }
        if self.local_epochs < 1 || self.local_epochs >= 10_000 {
            return Err(ConfigError::BadEpochs);
        }
        if self.batch_size < 1 {
            return Err(ConfigError::BadBatch);
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(ConfigError::BadLr(self.lr));
        }
        if self.num_clients < 1 {
            return Err(ConfigError::BadClients);
        }
        if !(self.alpha > 0.0) {
            return Err(ConfigError::BadAlpha(self.alpha));
        }
        if !(self.epsilon > 0.0) {
            return Err(ConfigError::BadEpsilon(self.epsilon));
        }
        if self.eval_every < 1 {
            return Err(ConfigError::BadEvalEvery);
        }
        if self.strategy == Strategy::FedCmd {
            if !(self.rho > 0.0 && self.rho < 1.0) {
                return Err(ConfigError::BadRho(self.rho));
            }
            let kp = self.selection_rounds();
            if kp < 1 || kp >= self.rounds {
                return Err(ConfigError::BadSelectionRounds {
                    kp,
                    k: self.rounds,
                });
            }
        }
        Ok(())
    }

    /// K_p = round(rho * K).
    pub fn selection_rounds(&self) -> u32 {
        (self.rho * self.rounds as f64).round() as u32
    }

    /// Clients sampled per round: ceil(gamma * N), nudged so that exact
    /// products like 0.1 * 100 do not round up from float noise.
    pub fn sampled_per_round(&self) -> usize {
        sampled_count(self.gamma, self.num_clients)
    }
}

pub(crate) fn sampled_count(gamma: f64, num_clients: usize) -> usize {
    (((gamma * num_clients as f64) - 1e-9).ceil() as usize).clamp(1, num_clients)
}

/// Resolves a model id against the dataset's sample shape and class count.
pub fn resolve_model(
    id: &str,
    input_shape: &[usize],
    classes: usize,
) -> Result<ModelSpec, ConfigError> {
    let needs_image = |spec: ModelSpec| -> Result<ModelSpec, ConfigError> {
        if input_shape.len() != 3 {
            return Err(ConfigError::ModelDatasetMismatch {
                model: id.to_string(),
                shape: input_shape.to_vec(),
                reason: "conv architectures need [C,H,W] inputs".to_string(),
            });
        }
        Ok(spec)
    };
    match id {
        "lenet5" => needs_image(arch::lenet5(input_shape, classes)),
        "lenet5-ext1" => needs_image(arch::lenet5_ext1(input_shape, classes)),
        "lenet5-ext2" => needs_image(arch::lenet5_ext2(input_shape, classes)),
        other => {
            let mut parts = other.split('-');
            if parts.next() != Some("dense") {
                return Err(ConfigError::UnknownModel(other.to_string()));
            }
            let mut hidden = Vec::new();
            for p in parts {
                match p.parse::<usize>() {
                    Ok(h) if h > 0 => hidden.push(h),
                    _ => return Err(ConfigError::UnknownModel(other.to_string())),
                }
            }
            Ok(arch::dense_net(input_shape, &hidden, classes))
        }
    }
}
