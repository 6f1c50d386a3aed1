//! Staleness weighting `alpha = S(t - tau)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("model timestamp {local} is ahead of the global timestamp {global}")]
pub struct FutureTimestamp {
    pub local: u64,
    pub global: u64,
}

/// Down-weighting of stale updates. Every family satisfies `S(0) = 1`, is
/// non-increasing and stays positive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum StalenessFn {
    /// `S(tau) = 1`.
    Constant,
    /// `S(tau) = (1 + tau)^(-exponent)`.
    Polynomial { exponent: f64 },
}

impl Default for StalenessFn {
    fn default() -> Self {
        StalenessFn::Polynomial { exponent: 0.5 }
    }
}

impl StalenessFn {
    pub fn weight(&self, staleness: u64) -> f64 {
        match *self {
            StalenessFn::Constant => 1.0,
            StalenessFn::Polynomial { exponent } => (1.0 + staleness as f64).powf(-exponent),
        }
    }

    /// `S(global - local)`; a local timestamp ahead of the global one is an
    /// error.
    pub fn factor(&self, global: u64, local: u64) -> Result<f64, FutureTimestamp> {
        global
            .checked_sub(local)
            .map(|s| self.weight(s))
            .ok_or(FutureTimestamp { local, global })
    }
}
