//! One or more live protocol rounds with the authority, the server and the
//! users speaking the wire protocol, either over in-memory channels or over
//! localhost TCP.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::afl::{local_train, server_step, stream_rng, streams, ClientTask, GlobalModel, SyntheticTask, TaskConfig, TaskError, TrainConfig};
use crate::field::{FieldError, Modulus, QuantizerConfig};
use crate::protocol::{unmask_aggregate, user_run, BasaServer, PublishError, RoundResult, ServerConfig, SlotGrant, UserError};
use crate::staleness::StalenessFn;
use crate::time::Micros;
use crate::transport::channel::{memory_endpoint, Acceptor, Connector, TcpAcceptor, TcpConnector, TransportError};
use crate::transport::net::{
    join_and_upload, pull_model, run_server, serve_authority, ModelSnapshot, RemoteAuthority, ServeError, ServeOptions,
    SessionError, SessionOutcome,
};
use crate::vault::{setup_with_rng, AttributeAuthority, LinkKey, MasterKey, PublicParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemoConfig {
    pub buffer_size: u32,
    /// Model dimension, bias included.
    pub dim: usize,
    pub users: u32,
    pub rounds: u64,
    pub seed: u64,
    pub modulus: Modulus,
    pub timeout_s: f64,
    pub scale: f64,
    pub clip: f64,
    pub train: TrainConfig,
    pub server_lr: f64,
}

impl Default for DemoConfig {
    fn default() -> Self {
        Self {
            buffer_size: 3,
            dim: 100,
            users: 3,
            rounds: 1,
            seed: 0,
            modulus: Modulus::default(),
            timeout_s: 30.0,
            scale: QuantizerConfig::<f64>::DEFAULT_SCALE,
            clip: QuantizerConfig::<f64>::DEFAULT_CLIP,
            train: TrainConfig::default(),
            server_lr: 1.0,
        }
    }
}

impl DemoConfig {
    pub fn task_config(&self) -> TaskConfig {
        TaskConfig {
            features: self.dim.saturating_sub(1),
            users: self.users as usize,
            samples_per_user: 100,
            test_samples: 500,
            min_shard: 10,
            seed: self.seed,
            ..TaskConfig::default()
        }
    }

    pub fn quantizer(&self) -> Result<QuantizerConfig<f64>, FieldError> {
        QuantizerConfig::new(self.modulus, self.scale, self.clip)
    }

    pub fn validate(&self) -> Result<(), DemoError> {
        if self.dim < 2 {
            return Err(DemoError::Config("dimension must be at least 2".into()));
        }
        if self.buffer_size == 0 || self.users < self.buffer_size {
            return Err(DemoError::Config("need at least one slot and no fewer users than slots".into()));
        }
        if self.rounds == 0 || (self.users as u64) < self.buffer_size as u64 * self.rounds {
            return Err(DemoError::Config("need buffer size times rounds users".into()));
        }
        self.quantizer()?;
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum DemoError {
    #[error("invalid demo configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Publish(#[from] PublishError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Serve(#[from] ServeError),
    #[error("user {user}: {source}")]
    User {
        user: u32,
        #[source]
        source: SessionError<UserError>,
    },
    #[error("a demo role panicked")]
    Panicked,
}

/// Authority secrets and the link key shared by server and authority.
pub struct DemoKeys {
    pub pp: PublicParams,
    pub mk: MasterKey,
    pub link: LinkKey,
}

impl DemoKeys {
    /// Keys derived from the demo seed, for reproducible transcripts.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = stream_rng(seed, streams::SETUP, 0);
        let (pp, mk) = setup_with_rng("demo", &mut rng);
        let link = LinkKey::random(&mut rng);
        Self { pp, mk, link }
    }
}

/// Outcome of a demo run.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutcome {
    pub results: Vec<RoundResult>,
    /// Unmasked staleness-weighted mean update of each round.
    pub aggregates: Vec<Vec<f64>>,
    /// Every committed upload payload, in commit order.
    pub uploads: Vec<Vec<u8>>,
}

pub fn demo_task(cfg: &DemoConfig) -> Result<SyntheticTask<f64>, DemoError> {
    Ok(SyntheticTask::generate(&cfg.task_config())?)
}

/// The serial server: publishes rounds through the authority at `aa` and
/// admits users arriving on `acceptor`.
pub fn server_role<A, C>(
    cfg: &DemoConfig,
    link: LinkKey,
    acceptor: A,
    aa: C,
    idle_limit: Duration,
    on_session: impl FnMut(&SessionOutcome),
) -> Result<Vec<RoundResult>, DemoError>
where
    A: Acceptor + Send + 'static,
    C: Connector,
{
    cfg.validate()?;
    let qcfg = cfg.quantizer()?;
    let mut sc = ServerConfig::new(cfg.buffer_size, cfg.dim);
    sc.timeout = Micros::from_secs_f64(cfg.timeout_s);
    sc.modulus = cfg.modulus;
    let server = BasaServer::new(sc, link, RemoteAuthority::new(aa), 0)?;
    let mut model = GlobalModel::<f64>::zeros(cfg.dim);
    let snapshot = ModelSnapshot {
        timestamp: 0,
        weights: model.weights.clone(),
    };
    let opts = ServeOptions {
        rounds: cfg.rounds,
        idle_limit,
    };
    let eta = cfg.server_lr;
    let results = run_server(
        server,
        acceptor,
        snapshot,
        opts,
        |r, snap| {
            if let Ok(next) = server_step(&model, r, &qcfg, eta) {
                model = next;
                snap.timestamp = model.timestamp;
                snap.weights = model.weights.clone();
            }
        },
        on_session,
    )?;
    Ok(results)
}

/// One user: pulls the model, trains on its shard, joins the buffer and
/// uploads its masked update. Quantization draws from a per-user stream
/// before any mask seed, so the unmasked sum does not depend on the slot a
/// user lands in.
pub fn user_role<S, C>(
    cfg: &DemoConfig,
    task: &SyntheticTask<f64>,
    user: u32,
    pp: &PublicParams,
    server: &S,
    aa: C,
) -> Result<(SlotGrant, Vec<u8>), DemoError>
where
    S: Connector,
    C: Connector,
{
    let wrap = |source| DemoError::User { user, source };
    let qcfg = cfg.quantizer()?;
    let model = pull_model(server).map_err(|e| wrap(e.into()))?;
    let ct = ClientTask {
        user,
        train: cfg.train,
        pulled_timestamp: model.timestamp,
    };
    let mut train_rng = stream_rng(cfg.seed, streams::TRAIN, user);
    let delta = local_train(&ct, &task.shards[user as usize], &model.weights, &mut train_rng);
    let mut rng = stream_rng(cfg.seed, streams::QUANTIZE, user);
    let mut keys = RemoteAuthority::new(aa);
    let wait = Duration::from_secs_f64(cfg.timeout_s * (cfg.users as f64 + 1.0));
    join_and_upload(server, wait, |grant| {
        user_run(&delta, model.timestamp, grant, pp, &mut keys, &qcfg, &StalenessFn::default(), &mut rng)
    })
    .map_err(wrap)
}

fn join<T>(h: thread::JoinHandle<Result<T, DemoError>>) -> Result<T, DemoError> {
    h.join().map_err(|_| DemoError::Panicked)?
}

fn run_in_process<AA, AC, SA, SC>(
    cfg: &DemoConfig,
    keys: DemoKeys,
    (aa_acceptor, aa_conn): (AA, AC),
    (srv_acceptor, srv_conn): (SA, SC),
) -> Result<DemoOutcome, DemoError>
where
    AA: Acceptor + Send + 'static,
    AC: Connector + Clone + Send + 'static,
    SA: Acceptor + Send + 'static,
    SC: Connector + Send + 'static,
{
    cfg.validate()?;
    let task = demo_task(cfg)?;
    let stop = Arc::new(AtomicBool::new(false));
    let aa = Arc::new(AttributeAuthority::new(keys.pp.clone(), keys.mk, keys.link.clone()));
    let aa_thread = {
        let stop = Arc::clone(&stop);
        thread::spawn(move || serve_authority(aa, aa_acceptor, &stop).map_err(DemoError::from))
    };
    let server_thread = {
        let (cfg, link, aa_conn) = (*cfg, keys.link.clone(), aa_conn.clone());
        thread::spawn(move || {
            let mut uploads = Vec::new();
            let results = server_role(&cfg, link, srv_acceptor, aa_conn, Duration::from_secs(60), |o| {
                if let SessionOutcome::Committed { upload, .. } = o {
                    uploads.push(upload.clone());
                }
            })?;
            Ok((results, uploads))
        })
    };
    let mut user_err = None;
    for u in 0..cfg.users.min(cfg.buffer_size * cfg.rounds as u32) {
        if let Err(e) = user_role(cfg, &task, u, &keys.pp, &srv_conn, aa_conn.clone()) {
            user_err = Some(e);
            break;
        }
    }
    drop(srv_conn);
    let served = join(server_thread);
    stop.store(true, Ordering::Relaxed);
    join(aa_thread)?;
    if let Some(e) = user_err {
        return Err(e);
    }
    let (results, uploads) = served?;
    let qcfg = cfg.quantizer()?;
    let aggregates = results.iter().map(|r| unmask_aggregate(r, &qcfg)).collect::<Result<_, _>>()?;
    Ok(DemoOutcome {
        results,
        aggregates,
        uploads,
    })
}

/// All roles in this process over in-memory channels; users run one after
/// another in id order.
pub fn run_loopback(cfg: &DemoConfig, keys: DemoKeys) -> Result<DemoOutcome, DemoError> {
    let (aa_conn, aa_acc) = memory_endpoint();
    let (srv_conn, srv_acc) = memory_endpoint();
    run_in_process(cfg, keys, (aa_acc, aa_conn), (srv_acc, srv_conn))
}

/// Same as [`run_loopback`] but over localhost TCP sockets.
pub fn run_tcp_in_process(cfg: &DemoConfig, keys: DemoKeys) -> Result<DemoOutcome, DemoError> {
    let any: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
    let aa_acc = TcpAcceptor::bind(any)?;
    let srv_acc = TcpAcceptor::bind(any)?;
    let aa_conn = TcpConnector::new(aa_acc.local_addr()?);
    let srv_conn = TcpConnector::new(srv_acc.local_addr()?);
    run_in_process(cfg, keys, (aa_acc, aa_conn), (srv_acc, srv_conn))
}
