use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};
use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use thiserror::Error;

use super::cost::CostModel;
use super::delay::DelayModel;
use crate::afl::{
    accuracy, apply_update, local_train, loss, run_sync_baseline, server_step, stream_rng, streams, weighted_mean,
    ClientTask, GlobalModel, MetricRow, Mode, RunOutcome, StopCondition, SyncConfig, SyntheticTask, TrainConfig,
};
use crate::field::{Modulus, QuantizerConfig};
use crate::protocol::{user_run, BasaServer, ServerConfig};
use crate::scalar::Real;
use crate::staleness::StalenessFn;
use crate::time::Micros;
use crate::transport::{codec, Frame, LoopbackNet, MsgType};
use crate::vault::{setup_with_rng, AttributeAuthority, LinkKey, PublicParams};

const SERVER: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SimConfig {
    pub mode: Mode,
    /// Users training at any time; the rest wait in an idle pool.
    pub concurrency: usize,
    pub buffer_size: u32,
    pub delay: DelayModel,
    pub cost: CostModel,
    pub timeout_s: f64,
    /// Probability that an admitted user vanishes before uploading.
    pub dropout: f64,
    /// One-way latency of the loopback transport.
    pub latency_s: f64,
    pub server_lr: f64,
    pub train: TrainConfig,
    pub staleness: StalenessFn,
    pub modulus: Modulus,
    pub scale: f64,
    pub clip: f64,
    /// Cohort size of the synchronous baseline.
    pub cohort: usize,
    /// Per-round protocol overhead of the synchronous baseline.
    pub sa_overhead_s: f64,
    pub seed: u64,
    pub stop: StopCondition,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            mode: Mode::BasaAfl,
            concurrency: 32,
            buffer_size: 10,
            delay: DelayModel::new(0.0, 2.0),
            cost: CostModel::default(),
            timeout_s: 30.0,
            dropout: 0.0,
            latency_s: 0.0,
            server_lr: 1.0,
            train: TrainConfig::default(),
            staleness: StalenessFn::default(),
            modulus: Modulus::default(),
            scale: QuantizerConfig::<f64>::DEFAULT_SCALE,
            clip: QuantizerConfig::<f64>::DEFAULT_CLIP,
            cohort: 32,
            sa_overhead_s: 0.0,
            seed: 0,
            stop: StopCondition::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("internal protocol failure: {0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventKind {
    UserFinishesTraining,
    ConnectAdmitted,
    UploadComplete,
    Timeout,
    RoundCommit,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEvent {
    pub time_us: u64,
    pub kind: EventKind,
    pub user: Option<u32>,
    pub round: u64,
    pub slot: Option<u32>,
    pub staleness: Option<f64>,
}

/// Receives the outputs of a run. Every method defaults to doing nothing.
pub trait Observer<T> {
    fn metric(&mut self, _row: &MetricRow) {}
    fn trace(&mut self, _event: &TraceEvent) {}
    /// Called after each committed round with the new model and the sum of
    /// staleness weights of the round.
    fn commit(&mut self, _model: &GlobalModel<T>, _staleness_total: f64) {}
}

impl<T> Observer<T> for () {}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub outcome: RunOutcome,
    pub uploads: u64,
    pub timeouts: u64,
    pub trainings_started: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Timeout,
    UploadComplete,
    TrainingDone,
}

impl Action {
    fn priority(self) -> u8 {
        match self {
            Action::Timeout => 0,
            Action::UploadComplete => 1,
            Action::TrainingDone => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Event {
    at: Micros,
    user: u32,
    seq: u64,
    action: Action,
}

impl Event {
    fn key(&self) -> (Micros, u8, u32, u64) {
        (self.at, self.action.priority(), self.user, self.seq)
    }
}

impl Ord for Event {
    // Reversed so the max-heap pops the earliest event.
    fn cmp(&self, other: &Self) -> Ordering {
        other.key().cmp(&self.key())
    }
}

impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct UserState<T> {
    delta: Vec<T>,
    pulled: u64,
    train_rng: ChaCha20Rng,
    quant_rng: ChaCha20Rng,
    /// Update and staleness weight in flight, in the no-SA mode.
    plain: Option<(Vec<T>, f64)>,
}

struct Secure {
    pp: PublicParams,
    aa: Arc<AttributeAuthority>,
    server: BasaServer<Arc<AttributeAuthority>>,
    net: LoopbackNet,
}

struct Engine<'a, T: Real, O: Observer<T>> {
    task: &'a SyntheticTask<T>,
    cfg: SimConfig,
    obs: &'a mut O,
    qcfg: QuantizerConfig<T>,
    model: GlobalModel<T>,
    users: Vec<UserState<T>>,
    idle: VecDeque<u32>,
    waiting: VecDeque<u32>,
    queue: BinaryHeap<Event>,
    seq: u64,
    delay_rng: ChaCha20Rng,
    dropout_rng: ChaCha20Rng,
    secure: Option<Secure>,
    plain_buffer: Vec<(Vec<T>, f64)>,
    latency: Micros,
    timeout: Micros,
    commits: u64,
    uploads: u64,
    timeouts: u64,
    started: u64,
    accuracy: f64,
    reached: Option<f64>,
    now: Micros,
}

fn validate(cfg: &SimConfig, users: usize) -> Result<(), SimError> {
    let bad = |m: &str| Err(SimError::Config(m.to_string()));
    if cfg.buffer_size == 0 {
        return bad("buffer size must be at least 1");
    }
    if cfg.concurrency == 0 || cfg.concurrency > users {
        return bad("concurrency must be between 1 and the number of users");
    }
    if cfg.mode != Mode::SyncFedavg && cfg.buffer_size as usize > users {
        return bad("buffer size must not exceed the number of users");
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return bad("dropout must lie in [0, 1)");
    }
    if !(cfg.timeout_s > 0.0 && cfg.timeout_s.is_finite()) {
        return bad("timeout must be positive");
    }
    if !(cfg.latency_s >= 0.0 && cfg.latency_s.is_finite()) {
        return bad("latency must be non-negative");
    }
    if !(cfg.server_lr > 0.0 && cfg.server_lr.is_finite()) {
        return bad("server learning rate must be positive");
    }
    if !(cfg.train.lr > 0.0 && cfg.train.lr.is_finite()) || cfg.train.batch_size == 0 {
        return bad("local learning rate and batch size must be positive");
    }
    if cfg.stop.max_time_s.is_nan() || cfg.stop.max_time_s <= 0.0 {
        return bad("maximum simulated time must be positive");
    }
    cfg.cost.validate().map_err(|m| SimError::Config(m.to_string()))
}

/// Runs one training experiment. The synchronous mode delegates to the
/// barrier baseline; the asynchronous modes share one event loop and differ
/// only in how uploads are aggregated and what they cost.
pub fn run_simulation<T: Real, O: Observer<T>>(
    task: &SyntheticTask<T>,
    cfg: &SimConfig,
    obs: &mut O,
) -> Result<SimReport, SimError> {
    validate(cfg, task.shards.len())?;
    if cfg.mode == Mode::SyncFedavg {
        let sync = SyncConfig {
            cohort: cfg.cohort,
            delay: cfg.delay,
            sa_overhead_s: cfg.sa_overhead_s,
            server_lr: cfg.server_lr,
            train: cfg.train,
            seed: cfg.seed,
            stop: cfg.stop,
        };
        let mut last = None;
        let outcome = run_sync_baseline(task, &sync, |row| {
            obs.metric(row);
            last = Some(row.buffer_commits);
        })
        .map_err(|e| SimError::Config(e.to_string()))?;
        let uploads = last.unwrap_or(0);
        return Ok(SimReport {
            outcome,
            uploads,
            timeouts: 0,
            trainings_started: uploads,
        });
    }
    let qcfg = QuantizerConfig::new(cfg.modulus, T::of(cfg.scale), T::of(cfg.clip))
        .map_err(|e| SimError::Config(e.to_string()))?;
    if cfg.mode == Mode::BasaAfl && cfg.buffer_size as u64 > qcfg.max_summands() {
        return Err(SimError::Config(format!(
            "buffer size {} exceeds the {} summands the quantizer can add without wraparound",
            cfg.buffer_size,
            qcfg.max_summands()
        )));
    }
    let mut engine = Engine::new(task, *cfg, obs, qcfg)?;
    engine.run()?;
    Ok(engine.report())
}

impl<'a, T: Real, O: Observer<T>> Engine<'a, T, O> {
    fn new(task: &'a SyntheticTask<T>, cfg: SimConfig, obs: &'a mut O, qcfg: QuantizerConfig<T>) -> Result<Self, SimError> {
        let n = task.shards.len();
        let users = (0..n as u32)
            .map(|u| UserState {
                delta: Vec::new(),
                pulled: 0,
                train_rng: stream_rng(cfg.seed, streams::TRAIN, u),
                quant_rng: stream_rng(cfg.seed, streams::QUANTIZE, u),
                plain: None,
            })
            .collect();
        let timeout = Micros::from_secs_f64(cfg.timeout_s);
        let secure = if cfg.mode == Mode::BasaAfl {
            let mut rng = stream_rng(cfg.seed, streams::SETUP, 0);
            let (pp, mk) = setup_with_rng("sim", &mut rng);
            let link = LinkKey::random(&mut rng);
            let aa = Arc::new(AttributeAuthority::new(pp.clone(), mk, link.clone()));
            let mut sc = ServerConfig::new(cfg.buffer_size, task.dim());
            sc.timeout = timeout;
            sc.modulus = cfg.modulus;
            let server = BasaServer::new(sc, link, Arc::clone(&aa), 0).map_err(|e| SimError::Protocol(e.to_string()))?;
            Some(Secure {
                pp,
                aa,
                server,
                net: LoopbackNet::new(Micros::from_secs_f64(cfg.latency_s)),
            })
        } else {
            None
        };
        Ok(Self {
            task,
            cfg,
            obs,
            qcfg,
            model: GlobalModel::zeros(task.dim()),
            users,
            idle: (cfg.concurrency as u32..n as u32).collect(),
            waiting: VecDeque::new(),
            queue: BinaryHeap::new(),
            seq: 0,
            delay_rng: stream_rng(cfg.seed, streams::DELAY, 0),
            dropout_rng: stream_rng(cfg.seed, streams::DROPOUT, 0),
            secure,
            plain_buffer: Vec::new(),
            latency: Micros::from_secs_f64(cfg.latency_s),
            timeout,
            commits: 0,
            uploads: 0,
            timeouts: 0,
            started: 0,
            accuracy: 0.0,
            reached: None,
            now: Micros::ZERO,
        })
    }

    fn schedule(&mut self, at: Micros, user: u32, action: Action) {
        self.seq += 1;
        self.queue.push(Event {
            at,
            user,
            seq: self.seq,
            action,
        });
    }

    fn trace(&mut self, kind: EventKind, user: Option<u32>, slot: Option<u32>, staleness: Option<f64>) {
        let ev = TraceEvent {
            time_us: self.now.0,
            kind,
            user,
            round: self.model.timestamp,
            slot,
            staleness,
        };
        self.obs.trace(&ev);
    }

    fn evaluate(&mut self) {
        let row = MetricRow {
            simulated_time_s: self.now.as_secs_f64(),
            round: self.model.timestamp,
            mode: self.cfg.mode,
            accuracy: accuracy(&self.model.weights, &self.task.test),
            loss: loss(&self.model.weights, &self.task.test, None).as_f64(),
            buffer_commits: self.commits,
        };
        self.accuracy = row.accuracy;
        if self.reached.is_none() && self.cfg.stop.target_accuracy.is_some_and(|t| row.accuracy >= t) {
            self.reached = Some(row.simulated_time_s);
        }
        self.obs.metric(&row);
    }

    fn start_training(&mut self, u: u32) {
        let shard = &self.task.shards[u as usize];
        let state = &mut self.users[u as usize];
        let ct = ClientTask {
            user: u,
            train: self.cfg.train,
            pulled_timestamp: self.model.timestamp,
        };
        state.delta = local_train(&ct, shard, &self.model.weights, &mut state.train_rng);
        state.pulled = self.model.timestamp;
        self.started += 1;
        let done = self.now + self.cfg.delay.sample(&mut self.delay_rng);
        self.schedule(done, u, Action::TrainingDone);
    }

    /// A user that uploaded or timed out leaves; the longest-idle user
    /// takes its place.
    fn rotate(&mut self, u: u32) {
        self.idle.push_back(u);
        let next = self.idle.pop_front().expect("idle pool holds at least the leaving user");
        self.start_training(next);
    }

    fn done(&self) -> bool {
        self.reached.is_some() || self.cfg.stop.max_rounds.is_some_and(|r| self.model.timestamp >= r)
    }

    fn run(&mut self) -> Result<(), SimError> {
        self.evaluate();
        for u in 0..self.cfg.concurrency as u32 {
            self.start_training(u);
        }
        while !self.done() {
            let Some(ev) = self.queue.pop() else { break };
            if ev.at.as_secs_f64() > self.cfg.stop.max_time_s {
                break;
            }
            self.now = ev.at;
            match ev.action {
                Action::TrainingDone => {
                    self.trace(EventKind::UserFinishesTraining, Some(ev.user), None, None);
                    self.waiting.push_back(ev.user);
                }
                Action::UploadComplete => self.on_upload(ev.user)?,
                Action::Timeout => self.on_timeout(ev.user),
            }
            self.admit()?;
        }
        Ok(())
    }

    fn admit(&mut self) -> Result<(), SimError> {
        while let Some(&u) = self.waiting.front() {
            if self.secure.as_ref().is_some_and(|s| s.server.is_busy()) {
                return Ok(());
            }
            self.waiting.pop_front();
            let drops = self.cfg.dropout > 0.0 && self.dropout_rng.random::<f64>() < self.cfg.dropout;
            if self.secure.is_some() {
                self.admit_secure(u, drops)?;
            } else {
                self.admit_plain(u, drops)?;
            }
        }
        Ok(())
    }

    fn admit_secure(&mut self, u: u32, drops: bool) -> Result<(), SimError> {
        let now = self.now;
        let latency = self.latency;
        let dim = self.task.dim();
        let sec = self.secure.as_mut().expect("secure mode");
        let grant = sec.server.on_connect(now).map_err(|e| SimError::Protocol(e.to_string()))?;
        let payload = codec::encode_grant(&grant);
        sec.net.deliver(SERVER, u, Frame::new(MsgType::SlotGrant, grant.round_id, payload), now);
        let arrive = now + latency;
        let frame = sec.net.receive(SERVER, u, arrive).expect("grant delivered after the latency");
        let grant = codec::decode_grant(frame.round_id, &frame.payload).map_err(|e| SimError::Protocol(e.to_string()))?;
        let slot = grant.slot;
        let k = grant.buffer_size();

        let state = &mut self.users[u as usize];
        let alpha = self.cfg.staleness.factor(grant.round_id, state.pulled).map_err(|e| SimError::Protocol(e.to_string()))?;
        self.trace(EventKind::ConnectAdmitted, Some(u), Some(slot), Some(alpha));
        let upload_at = arrive + Micros::from_secs_f64(self.cfg.cost.slot_cost(k, slot, dim)) + latency;
        if drops || upload_at >= grant.deadline {
            self.schedule(grant.deadline, u, Action::Timeout);
            return Ok(());
        }
        let state = &mut self.users[u as usize];
        let sec = self.secure.as_mut().expect("secure mode");
        let mut aa = Arc::clone(&sec.aa);
        let up = user_run(
            &state.delta,
            state.pulled,
            &grant,
            &sec.pp,
            &mut aa,
            &self.qcfg,
            &self.cfg.staleness,
            &mut state.quant_rng,
        )
        .map_err(|e| SimError::Protocol(e.to_string()))?;
        let frame = Frame::new(MsgType::Upload, grant.round_id, codec::encode_upload(&up));
        sec.net.deliver(u, SERVER, frame, upload_at - latency);
        self.schedule(upload_at, u, Action::UploadComplete);
        Ok(())
    }

    fn admit_plain(&mut self, u: u32, drops: bool) -> Result<(), SimError> {
        let state = &mut self.users[u as usize];
        let alpha = self
            .cfg
            .staleness
            .factor(self.model.timestamp, state.pulled)
            .map_err(|e| SimError::Protocol(e.to_string()))?;
        state.plain = Some((state.delta.clone(), alpha));
        self.trace(EventKind::ConnectAdmitted, Some(u), None, Some(alpha));
        if drops {
            self.users[u as usize].plain = None;
            self.schedule(self.now + self.timeout, u, Action::Timeout);
        } else {
            let at = self.now + Micros::from_secs_f64(self.cfg.cost.plain_upload_cost(self.task.dim())) + self.latency;
            self.schedule(at, u, Action::UploadComplete);
        }
        Ok(())
    }

    fn on_upload(&mut self, u: u32) -> Result<(), SimError> {
        self.uploads += 1;
        self.trace(EventKind::UploadComplete, Some(u), None, None);
        let committed = if let Some(sec) = self.secure.as_mut() {
            let frame = sec.net.receive(u, SERVER, self.now).expect("upload delivered");
            let up = codec::decode_upload(&frame.payload, self.cfg.modulus).map_err(|e| SimError::Protocol(e.to_string()))?;
            match sec.server.on_upload(up).map_err(|e| SimError::Protocol(e.to_string()))? {
                Some(result) => {
                    let next = server_step(&self.model, &result, &self.qcfg, T::of(self.cfg.server_lr))
                        .map_err(|e| SimError::Protocol(e.to_string()))?;
                    Some((next, result.staleness_total))
                }
                None => None,
            }
        } else {
            let contribution = self.users[u as usize].plain.take().expect("plain upload pending");
            self.plain_buffer.push(contribution);
            if self.plain_buffer.len() == self.cfg.buffer_size as usize {
                let buffer = std::mem::take(&mut self.plain_buffer);
                let total: f64 = buffer.iter().map(|(_, a)| a).sum();
                let mean = weighted_mean(&buffer);
                Some((apply_update(&self.model, &mean, T::of(self.cfg.server_lr)), total))
            } else {
                None
            }
        };
        if let Some((next, total)) = committed {
            self.model = next;
            self.commits += self.cfg.buffer_size as u64;
            self.trace(EventKind::RoundCommit, None, None, Some(total));
            self.obs.commit(&self.model, total);
            self.evaluate();
        }
        self.rotate(u);
        Ok(())
    }

    fn on_timeout(&mut self, u: u32) {
        self.timeouts += 1;
        if let Some(sec) = self.secure.as_mut() {
            let fired = sec.server.on_timeout(self.now);
            debug_assert!(fired, "timeout event without an expired grant");
        }
        self.trace(EventKind::Timeout, Some(u), None, None);
        self.rotate(u);
    }

    fn report(&self) -> SimReport {
        SimReport {
            outcome: RunOutcome {
                mode: self.cfg.mode,
                time_to_target_s: self.reached,
                censored: self.cfg.stop.target_accuracy.is_some() && self.reached.is_none(),
                rounds: self.model.timestamp,
                final_accuracy: self.accuracy,
                simulated_time_s: self.now.as_secs_f64(),
            },
            uploads: self.uploads,
            timeouts: self.timeouts,
            trainings_started: self.started,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::afl::TaskConfig;
    use std::collections::HashMap;

    #[derive(Default)]
    struct Recorder {
        rows: Vec<MetricRow>,
        trace: Vec<TraceEvent>,
        commits: Vec<(Vec<f64>, f64)>,
    }

    impl Observer<f64> for Recorder {
        fn metric(&mut self, row: &MetricRow) {
            self.rows.push(row.clone());
        }
        fn trace(&mut self, event: &TraceEvent) {
            self.trace.push(event.clone());
        }
        fn commit(&mut self, model: &GlobalModel<f64>, staleness_total: f64) {
            self.commits.push((model.weights.clone(), staleness_total));
        }
    }

    fn task(users: usize) -> SyntheticTask<f64> {
        SyntheticTask::generate(&TaskConfig {
            features: 5,
            users,
            samples_per_user: 40,
            test_samples: 200,
            min_shard: 5,
            seed: 2,
            ..TaskConfig::default()
        })
        .unwrap()
    }

    fn rounds(n: u64) -> StopCondition {
        StopCondition {
            target_accuracy: None,
            max_time_s: 1e9,
            max_rounds: Some(n),
        }
    }

    #[test]
    fn single_user_round_takes_the_train_time() {
        let t = task(1);
        let cfg = SimConfig {
            concurrency: 1,
            buffer_size: 1,
            delay: DelayModel::new(0.0, 1.25),
            cost: CostModel::zero(),
            stop: rounds(3),
            ..SimConfig::default()
        };
        let mut rec = Recorder::default();
        let report = run_simulation(&t, &cfg, &mut rec).unwrap();
        assert_eq!(report.outcome.rounds, 3);
        let times: Vec<f64> = rec.rows.iter().map(|r| r.simulated_time_s).collect();
        assert_eq!(times, vec![0.0, 1.25, 2.5, 3.75]);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let t = task(12);
        let cfg = SimConfig {
            concurrency: 12,
            buffer_size: 4,
            delay: DelayModel::new(3.0, 1.0),
            dropout: 0.1,
            stop: rounds(6),
            ..SimConfig::default()
        };
        let mut a = Recorder::default();
        let mut b = Recorder::default();
        run_simulation(&t, &cfg, &mut a).unwrap();
        run_simulation(&t, &cfg, &mut b).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.rows, b.rows);
        let other = SimConfig { seed: 1, ..cfg };
        let mut c = Recorder::default();
        run_simulation(&t, &other, &mut c).unwrap();
        assert_ne!(a.trace, c.trace);
    }

    #[test]
    fn admission_is_serial_and_every_training_resolves_once() {
        let t = task(16);
        let cfg = SimConfig {
            concurrency: 10,
            buffer_size: 5,
            delay: DelayModel::new(1.0, 0.2),
            cost: CostModel {
                encrypt_s: 0.05,
                decrypt_s: 0.05,
                ..CostModel::default()
            },
            timeout_s: 2.0,
            dropout: 0.2,
            stop: rounds(10),
            ..SimConfig::default()
        };
        let mut rec = Recorder::default();
        let report = run_simulation(&t, &cfg, &mut rec).unwrap();
        assert!(report.timeouts > 0);
        assert_eq!(report.outcome.rounds, 10);

        let mut holder: Option<u32> = None;
        let mut open: HashMap<u32, u32> = HashMap::new();
        let mut last = 0;
        for ev in &rec.trace {
            assert!(ev.time_us >= last);
            last = ev.time_us;
            match ev.kind {
                EventKind::UserFinishesTraining => *open.entry(ev.user.unwrap()).or_default() += 1,
                EventKind::ConnectAdmitted => {
                    assert!(holder.is_none(), "two grants in flight");
                    holder = ev.user;
                }
                EventKind::UploadComplete | EventKind::Timeout => {
                    assert_eq!(holder, ev.user);
                    holder = None;
                    let n = open.get_mut(&ev.user.unwrap()).unwrap();
                    assert_eq!(*n, 1, "resolution without a finished training");
                    *n -= 1;
                }
                EventKind::RoundCommit => {}
            }
        }
        let resolved = rec
            .trace
            .iter()
            .filter(|e| matches!(e.kind, EventKind::UploadComplete | EventKind::Timeout))
            .count() as u64;
        assert_eq!(resolved, report.uploads + report.timeouts);
        assert_eq!(report.uploads, 10 * 5);
    }

    #[test]
    fn secure_and_plain_runs_track_each_other() {
        let t = task(10);
        let base = SimConfig {
            concurrency: 10,
            buffer_size: 4,
            delay: DelayModel::new(2.0, 1.0),
            cost: CostModel::zero(),
            stop: rounds(15),
            ..SimConfig::default()
        };
        let mut secure = Recorder::default();
        let mut plain = Recorder::default();
        run_simulation(&t, &base, &mut secure).unwrap();
        run_simulation(&t, &SimConfig { mode: Mode::NosaAfl, ..base }, &mut plain).unwrap();
        let strip = |r: &Recorder| -> Vec<(u64, EventKind, Option<u32>)> {
            r.trace.iter().map(|e| (e.time_us, e.kind, e.user)).collect()
        };
        assert_eq!(strip(&secure), strip(&plain));
        let mut bound = 0.0;
        for ((ws, a), (wp, b)) in secure.commits.iter().zip(&plain.commits) {
            assert_eq!(a, b);
            bound += base.server_lr * base.buffer_size as f64 / (base.scale * a);
            let gap = ws.iter().zip(wp).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(gap <= bound, "gap {gap} above {bound}");
        }
        assert_eq!(secure.commits.len(), 15);
    }

    #[test]
    fn staleness_weights_follow_the_granted_round() {
        let t = task(8);
        let cfg = SimConfig {
            concurrency: 8,
            buffer_size: 2,
            delay: DelayModel::new(4.0, 0.5),
            stop: rounds(12),
            ..SimConfig::default()
        };
        let mut rec = Recorder::default();
        run_simulation(&t, &cfg, &mut rec).unwrap();
        let mut stale_seen = false;
        for ev in rec.trace.iter().filter(|e| e.kind == EventKind::ConnectAdmitted) {
            let a = ev.staleness.unwrap();
            assert!(a > 0.0 && a <= 1.0);
            stale_seen |= a < 1.0;
        }
        assert!(stale_seen);
    }

    #[test]
    fn rejects_invalid_configs() {
        let t = task(4);
        for cfg in [
            SimConfig { concurrency: 5, ..SimConfig::default() },
            SimConfig { concurrency: 4, buffer_size: 0, ..SimConfig::default() },
            SimConfig { concurrency: 4, buffer_size: 5, ..SimConfig::default() },
            SimConfig { concurrency: 4, buffer_size: 2, dropout: 1.0, ..SimConfig::default() },
        ] {
            assert!(matches!(run_simulation(&t, &cfg, &mut ()), Err(SimError::Config(_))));
        }
    }

    #[test]
    fn unreachable_target_is_censored() {
        let t = task(4);
        let cfg = SimConfig {
            concurrency: 4,
            buffer_size: 2,
            stop: StopCondition {
                target_accuracy: Some(1.01),
                max_time_s: 20.0,
                max_rounds: None,
            },
            ..SimConfig::default()
        };
        let r = run_simulation(&t, &cfg, &mut ()).unwrap();
        assert!(r.outcome.censored);
        assert!(r.outcome.time_to_target_s.is_none());
    }
}
