use rand::seq::index;
use thiserror::Error;

use super::data::SyntheticTask;
use super::model::{accuracy, local_train, loss, ClientTask, GlobalModel, TrainConfig};
use super::{apply_update, streams, stream_rng, weighted_mean, MetricRow, Mode, RunOutcome, StopCondition};
use crate::scalar::Real;
use crate::sim::DelayModel;
use crate::time::Micros;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyncConfig {
    pub cohort: usize,
    pub delay: DelayModel,
    /// Fixed per-round cost of the aggregation protocol, in seconds.
    pub sa_overhead_s: f64,
    pub server_lr: f64,
    pub train: TrainConfig,
    pub seed: u64,
    pub stop: StopCondition,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SyncError {
    #[error("cohort of {cohort} exceeds the {users} available users")]
    CohortTooLarge { cohort: usize, users: usize },
    #[error("cohort must not be empty")]
    EmptyCohort,
}

/// Wall-clock of one barrier round: the slowest member plus the overhead.
pub fn round_duration(member_times: &[Micros], overhead: Micros) -> Micros {
    member_times.iter().copied().max().unwrap_or(Micros::ZERO) + overhead
}

/// Synchronous FedAvg: each round samples a cohort uniformly, waits for
/// its slowest member and applies the shard-size weighted mean update.
pub fn run_sync_baseline<T: Real>(
    task: &SyntheticTask<T>,
    cfg: &SyncConfig,
    mut on_row: impl FnMut(&MetricRow),
) -> Result<RunOutcome, SyncError> {
    let users = task.shards.len();
    if cfg.cohort == 0 {
        return Err(SyncError::EmptyCohort);
    }
    if cfg.cohort > users {
        return Err(SyncError::CohortTooLarge {
            cohort: cfg.cohort,
            users,
        });
    }
    let mut cohort_rng = stream_rng(cfg.seed, streams::COHORT, 0);
    let mut delay_rng = stream_rng(cfg.seed, streams::DELAY, 0);
    let mut train_rngs: Vec<_> = (0..users as u32).map(|u| stream_rng(cfg.seed, streams::TRAIN, u)).collect();
    let overhead = Micros::from_secs_f64(cfg.sa_overhead_s);
    let eta = T::of(cfg.server_lr);

    let mut model = GlobalModel::<T>::zeros(task.dim());
    let mut now = Micros::ZERO;
    let mut commits = 0u64;
    let mut reached = None;
    let emit = |model: &GlobalModel<T>, now: Micros, commits: u64, on_row: &mut dyn FnMut(&MetricRow)| {
        let row = MetricRow {
            simulated_time_s: now.as_secs_f64(),
            round: model.timestamp,
            mode: Mode::SyncFedavg,
            accuracy: accuracy(&model.weights, &task.test),
            loss: loss(&model.weights, &task.test, None).as_f64(),
            buffer_commits: commits,
        };
        on_row(&row);
        row.accuracy
    };
    let mut acc = emit(&model, now, commits, &mut on_row);

    loop {
        if let Some(target) = cfg.stop.target_accuracy {
            if acc >= target {
                reached = Some(now.as_secs_f64());
                break;
            }
        }
        if cfg.stop.max_rounds.is_some_and(|r| model.timestamp >= r) {
            break;
        }
        let mut members = index::sample(&mut cohort_rng, users, cfg.cohort).into_vec();
        members.sort_unstable();
        let times: Vec<Micros> = members.iter().map(|_| cfg.delay.sample(&mut delay_rng)).collect();
        let next = now + round_duration(&times, overhead);
        if next.as_secs_f64() > cfg.stop.max_time_s {
            break;
        }
        let updates: Vec<(Vec<T>, f64)> = members
            .iter()
            .map(|&u| {
                let ct = ClientTask {
                    user: u as u32,
                    train: cfg.train,
                    pulled_timestamp: model.timestamp,
                };
                let delta = local_train(&ct, &task.shards[u], &model.weights, &mut train_rngs[u]);
                (delta, task.shards[u].len() as f64)
            })
            .collect();
        model = apply_update(&model, &weighted_mean(&updates), eta);
        now = next;
        commits += members.len() as u64;
        acc = emit(&model, now, commits, &mut on_row);
    }
    Ok(RunOutcome {
        mode: Mode::SyncFedavg,
        time_to_target_s: reached,
        censored: cfg.stop.target_accuracy.is_some() && reached.is_none(),
        rounds: model.timestamp,
        final_accuracy: acc,
        simulated_time_s: now.as_secs_f64(),
    })
}
