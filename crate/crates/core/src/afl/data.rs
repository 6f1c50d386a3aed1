//! Seeded two-class Gaussian-mixture task with non-identically distributed
//! user shards.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// Row-major samples with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: usize,
    x: Vec<T>,
    y: Vec<u8>,
}

impl<T: Real> Dataset<T> {
    pub fn new(features: usize, x: Vec<T>, y: Vec<u8>) -> Self {
        assert_eq!(x.len(), features * y.len(), "feature matrix does not match labels");
        Self { features, x, y }
    }

    pub fn empty(features: usize) -> Self {
        Self::new(features, Vec::new(), Vec::new())
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.x[i * self.features..(i + 1) * self.features]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.y[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.y
    }

    fn push(&mut self, row: &[T], label: u8) {
        self.x.extend_from_slice(row);
        self.y.push(label);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskConfig {
    pub features: usize,
    pub users: usize,
    /// Mean shard size; the total pool is `users * samples_per_user`.
    pub samples_per_user: usize,
    pub test_samples: usize,
    /// Concentration of the per-class Dirichlet split over users.
    pub dirichlet_alpha: f64,
    /// Shards are redrawn until every user holds at least this many samples.
    pub min_shard: usize,
    /// Distance between the class means along the separating direction,
    /// in units of the noise standard deviation.
    pub separation: f64,
    /// Ratio between the largest and smallest per-feature scale. Scaling
    /// leaves the best achievable accuracy unchanged but slows gradient
    /// descent, so training takes many rounds.
    pub scale_spread: f64,
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            features: 49,
            users: 32,
            samples_per_user: 200,
            test_samples: 2000,
            dirichlet_alpha: 0.5,
            min_shard: 20,
            separation: 4.0,
            scale_spread: 30.0,
            seed: 0,
        }
    }
}

impl TaskConfig {
    /// Model dimension: one weight per feature plus a bias.
    pub fn dim(&self) -> usize {
        self.features + 1
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("task needs at least one feature and one user")]
    Empty,
    #[error("dirichlet concentration must be positive, got {0}")]
    Concentration(f64),
    #[error("could not give every user {min} samples after {tries} draws")]
    ShardsTooSmall { min: usize, tries: usize },
}

#[derive(Debug, Clone)]
pub struct SyntheticTask<T> {
    pub config: TaskConfig,
    pub shards: Vec<Dataset<T>>,
    pub test: Dataset<T>,
}

struct Mixture {
    scale: Vec<f64>,
    offset: Vec<f64>,
    direction: Vec<f64>,
    half_gap: f64,
}

impl Mixture {
    fn new(cfg: &TaskConfig, rng: &mut ChaCha20Rng) -> Self {
        let f = cfg.features;
        let mut direction: Vec<f64> = (0..f).map(|_| rng.sample(StandardNormal)).collect();
        let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        direction.iter_mut().for_each(|v| *v /= norm);
        // Shared offset so the decision boundary does not pass the origin.
        let offset = direction.iter().map(|v| 1.0 + 0.5 * v).collect();
        let spread = cfg.scale_spread.max(1.0);
        let scale = (0..f)
            .map(|i| {
                let t = if f > 1 { i as f64 / (f - 1) as f64 } else { 0.5 };
                spread.powf(t - 0.5)
            })
            .collect();
        Self {
            scale,
            offset,
            direction,
            half_gap: cfg.separation / 2.0,
        }
    }

    fn sample<T: Real>(&self, label: u8, rng: &mut ChaCha20Rng, out: &mut Vec<T>) {
        out.clear();
        let sign = if label == 1 { 1.0 } else { -1.0 };
        for ((o, d), s) in self.offset.iter().zip(&self.direction).zip(&self.scale) {
            let noise: f64 = rng.sample(StandardNormal);
            out.push(T::of(s * (o + sign * self.half_gap * d + noise)));
        }
    }
}

fn dirichlet(alpha: f64, n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("validated concentration");
    let mut p: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let s: f64 = p.iter().sum();
    if s > 0.0 {
        p.iter_mut().for_each(|v| *v /= s);
    } else {
        p.iter_mut().for_each(|v| *v = 1.0 / n as f64);
    }
    p
}

/// Splits `count` items according to `p` by largest remainders.
fn apportion(count: usize, p: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|v| v * count as f64).collect();
    let mut out: Vec<usize> = raw.iter().map(|v| v.floor() as usize).collect();
    let mut left = count - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    out
}

const MAX_TRIES: usize = 10_000;

impl<T: Real> SyntheticTask<T> {
    pub fn generate(cfg: &TaskConfig) -> Result<Self, TaskError> {
        if cfg.features == 0 || cfg.users == 0 {
            return Err(TaskError::Empty);
        }
        if cfg.dirichlet_alpha.is_nan() || cfg.dirichlet_alpha <= 0.0 {
            return Err(TaskError::Concentration(cfg.dirichlet_alpha));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let mix = Mixture::new(cfg, &mut rng);
        let total = cfg.users * cfg.samples_per_user;
        let per_class = [total / 2, total - total / 2];

        let mut counts = None;
        for _ in 0..MAX_TRIES {
            let split: Vec<Vec<usize>> = per_class
                .iter()
                .map(|&n| apportion(n, &dirichlet(cfg.dirichlet_alpha, cfg.users, &mut rng)))
                .collect();
            if (0..cfg.users).all(|u| split[0][u] + split[1][u] >= cfg.min_shard) {
                counts = Some(split);
                break;
            }
        }
        let counts = counts.ok_or(TaskError::ShardsTooSmall {
            min: cfg.min_shard,
            tries: MAX_TRIES,
        })?;

        let mut row = Vec::with_capacity(cfg.features);
        let mut shards = Vec::with_capacity(cfg.users);
        #[allow(clippy::needless_range_loop)]
        for u in 0..cfg.users {
            let mut shard = Dataset::empty(cfg.features);
            for label in 0..2u8 {
                for _ in 0..counts[label as usize][u] {
                    mix.sample(label, &mut rng, &mut row);
                    shard.push(&row, label);
                }
            }
            shards.push(shard);
        }
        let mut test = Dataset::empty(cfg.features);
        for i in 0..cfg.test_samples {
            let label = (i % 2) as u8;
            mix.sample(label, &mut rng, &mut row);
            test.push(&row, label);
        }
        Ok(Self {
            config: *cfg,
            shards,
            test,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    pub fn shard_sizes(&self) -> Vec<usize> {
        self.shards.iter().map(Dataset::len).collect()
    }
}
