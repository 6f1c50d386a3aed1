//! Logistic regression with the bias stored as the last weight.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use crate::scalar::Real;

/// Global weights and the number of rounds committed so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel<T> {
    pub weights: Vec<T>,
    pub timestamp: u64,
}

impl<T: Real> GlobalModel<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![T::zero(); dim],
            timestamp: 0,
        }
    }
}

fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

fn logit<T: Real>(w: &[T], row: &[T]) -> T {
    let (bias, coef) = w.split_last().expect("model has a bias");
    coef.iter().zip(row).fold(*bias, |acc, (&a, &b)| acc + a * b)
}

/// `log(1 + exp(z))` without overflow.
fn softplus<T: Real>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Mean cross-entropy over `idx` (all rows when `None`).
pub fn loss<T: Real>(w: &[T], data: &Dataset<T>, idx: Option<&[usize]>) -> T {
    let mut total = T::zero();
    let mut n = 0usize;
    let mut visit = |i: usize| {
        let z = logit(w, data.row(i));
        total = total + if data.label(i) == 1 { softplus(-z) } else { softplus(z) };
        n += 1;
    };
    match idx {
        Some(idx) => idx.iter().copied().for_each(&mut visit),
        None => (0..data.len()).for_each(&mut visit),
    }
    if n == 0 {
        T::zero()
    } else {
        total / T::of(n as f64)
    }
}

/// Gradient of [`loss`] written into `grad`.
pub fn gradient<T: Real>(w: &[T], data: &Dataset<T>, idx: Option<&[usize]>, grad: &mut [T]) {
    grad.iter_mut().for_each(|g| *g = T::zero());
    let mut n = 0usize;
    let (gb, gw) = grad.split_last_mut().expect("model has a bias");
    let mut visit = |i: usize| {
        let row = data.row(i);
        let err = sigmoid(logit(w, row)) - T::of(data.label(i) as f64);
        for (g, &x) in gw.iter_mut().zip(row) {
            *g = *g + err * x;
        }
        *gb = *gb + err;
        n += 1;
    };
    match idx {
        Some(idx) => idx.iter().copied().for_each(&mut visit),
        None => (0..data.len()).for_each(&mut visit),
    }
    if n > 0 {
        let inv = T::one() / T::of(n as f64);
        grad.iter_mut().for_each(|g| *g = *g * inv);
    }
}

pub fn accuracy<T: Real>(w: &[T], data: &Dataset<T>) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let correct = (0..data.len())
        .filter(|&i| (logit(w, data.row(i)) >= T::zero()) == (data.label(i) == 1))
        .count();
    correct as f64 / data.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub local_steps: u32,
    /// Minibatch size; a value of at least the shard size means full batch.
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            local_steps: 5,
            batch_size: 32,
        }
    }
}

/// One user's local training job.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClientTask {
    pub user: u32,
    pub train: TrainConfig,
    /// Timestamp of the model the user pulled.
    pub pulled_timestamp: u64,
}

/// Runs `local_steps` minibatch SGD steps from `weights` and returns
/// `weights - trained`, so the server applies `w - eta * delta`.
pub fn local_train<T: Real, R: Rng + ?Sized>(task: &ClientTask, shard: &Dataset<T>, weights: &[T], rng: &mut R) -> Vec<T> {
    assert!(!shard.is_empty(), "user {} has an empty shard", task.user);
    let lr = T::of(task.train.lr);
    let mut w = weights.to_vec();
    let mut grad = vec![T::zero(); w.len()];
    let full = task.train.batch_size >= shard.len();
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut cursor = shard.len();
    for _ in 0..task.train.local_steps {
        if full {
            gradient(&w, shard, None, &mut grad);
        } else {
            if cursor + task.train.batch_size > order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            let batch = &order[cursor..cursor + task.train.batch_size];
            cursor += task.train.batch_size;
            gradient(&w, shard, Some(batch), &mut grad);
        }
        for (wi, &g) in w.iter_mut().zip(&grad) {
            *wi = *wi - lr * g;
        }
    }
    weights.iter().zip(&w).map(|(&a, &b)| a - b).collect()
}
