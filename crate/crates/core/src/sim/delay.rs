use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

use crate::time::Micros;

/// Local training time: a constant base plus an exponential straggler delay
/// with scale `beta` seconds. `beta = 0` means no delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DelayModel {
    pub beta: f64,
    pub base_train_time: f64,
}

impl DelayModel {
    pub fn new(beta: f64, base_train_time: f64) -> Self {
        assert!(beta >= 0.0 && beta.is_finite(), "delay scale must be finite and non-negative");
        assert!(base_train_time >= 0.0 && base_train_time.is_finite(), "train time must be non-negative");
        Self { beta, base_train_time }
    }

    pub fn sample_delay<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.beta == 0.0 {
            return 0.0;
        }
        Exp::new(1.0 / self.beta).expect("positive rate").sample(rng)
    }

    /// Base time plus a fresh delay, on the microsecond clock.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Micros {
        Micros::from_secs_f64(self.base_train_time + self.sample_delay(rng))
    }
}
