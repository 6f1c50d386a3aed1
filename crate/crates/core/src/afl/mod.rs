//! Asynchronous federated learning on top of the secure buffer, and the
//! baselines it is compared with.

mod data;
mod model;
mod sync;

pub use data::{Dataset, SyntheticTask, TaskConfig, TaskError};
pub use model::{accuracy, gradient, local_train, loss, ClientTask, GlobalModel, TrainConfig};
pub use sync::{run_sync_baseline, SyncConfig, SyncError};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::field::{FieldError, QuantizerConfig};
use crate::protocol::{unmask_aggregate, RoundResult};
use crate::scalar::Real;

/// Training mode, as named in metrics and on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    BasaAfl,
    NosaAfl,
    SyncFedavg,
}

impl Mode {
    pub fn as_str(&self) -> &'static str {
        match self {
            Mode::BasaAfl => "basa-afl",
            Mode::NosaAfl => "nosa-afl",
            Mode::SyncFedavg => "sync-fedavg",
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One evaluation point of a training run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricRow {
    pub simulated_time_s: f64,
    pub round: u64,
    pub mode: Mode,
    pub accuracy: f64,
    pub loss: f64,
    /// Updates committed into the global model so far.
    pub buffer_commits: u64,
}

/// When a run stops.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCondition {
    pub target_accuracy: Option<f64>,
    pub max_time_s: f64,
    pub max_rounds: Option<u64>,
}

impl Default for StopCondition {
    fn default() -> Self {
        Self {
            target_accuracy: Some(0.9),
            max_time_s: 20_000.0,
            max_rounds: None,
        }
    }
}

/// Result of a training run. A run that never reaches the target is
/// censored, not failed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunOutcome {
    pub mode: Mode,
    pub time_to_target_s: Option<f64>,
    pub censored: bool,
    pub rounds: u64,
    pub final_accuracy: f64,
    pub simulated_time_s: f64,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AflError {
    #[error("result of round {result} applied to model at timestamp {model}")]
    RoundMismatch { model: u64, result: u64 },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// `w - eta * mean`, advancing the timestamp.
pub fn apply_update<T: Real>(model: &GlobalModel<T>, mean: &[T], eta: T) -> GlobalModel<T> {
    assert_eq!(model.weights.len(), mean.len(), "update dimension mismatch");
    GlobalModel {
        weights: model.weights.iter().zip(mean).map(|(&w, &d)| w - eta * d).collect(),
        timestamp: model.timestamp + 1,
    }
}

/// Applies an unmasked secure-buffer result: `w - eta * sum / sum(alpha)`.
pub fn server_step<T: Real>(
    model: &GlobalModel<T>,
    result: &RoundResult,
    cfg: &QuantizerConfig<T>,
    eta: T,
) -> Result<GlobalModel<T>, AflError> {
    if result.round_id != model.timestamp {
        return Err(AflError::RoundMismatch {
            model: model.timestamp,
            result: result.round_id,
        });
    }
    let mean = unmask_aggregate(result, cfg)?;
    Ok(apply_update(model, &mean, eta))
}

/// `sum(w_k * v_k) / sum(w_k)` in plain arithmetic.
pub fn weighted_mean<T: Real>(items: &[(Vec<T>, f64)]) -> Vec<T> {
    let dim = items.first().map_or(0, |(v, _)| v.len());
    let total: f64 = items.iter().map(|(_, w)| w).sum();
    assert!(total > 0.0, "weights must sum to a positive value");
    let mut out = vec![T::zero(); dim];
    for (v, w) in items {
        let w = T::of(*w);
        for (o, &x) in out.iter_mut().zip(v) {
            *o = *o + w * x;
        }
    }
    let inv = T::of(1.0 / total);
    out.iter_mut().for_each(|o| *o = *o * inv);
    out
}

/// Independent deterministic random stream for `(seed, label, index)`.
pub fn stream_rng(seed: u64, label: u32, index: u32) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((label as u64) << 32) | index as u64);
    rng
}

/// Stream labels used by the training runs.
pub mod streams {
    pub const COHORT: u32 = 1;
    pub const DELAY: u32 = 2;
    pub const TRAIN: u32 = 3;
    pub const QUANTIZE: u32 = 4;
    pub const MASK: u32 = 5;
    pub const SETUP: u32 = 6;
    pub const DROPOUT: u32 = 7;
}
