//! Authority, server and user roles speaking the wire protocol over any
//! [`FrameChannel`] backend.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use super::channel::{Acceptor, Connector, FrameChannel, TransportError};
use super::codec::{self, AaRequest, AaResponse, AbortReason, ConnectIntent};
use super::{Frame, MsgType};
use crate::protocol::{
    AttributePublisher, BasaServer, KeyError, KeySource, PublishError, RoundResult, ServerError, SlotGrant,
    UploadMsg,
};
use crate::time::Micros;
use crate::vault::{AttributeAuthority, AttributePublicKey, AttributeSecretKey, KeyRequest, RoundNotice};

const POLL: Duration = Duration::from_millis(20);
const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

/// Sends one request to the authority and returns its answer.
fn authority_call<C: Connector>(conn: &C, req: &AaRequest) -> Result<AaResponse, TransportError> {
    let mut ch = conn.connect()?;
    ch.set_recv_timeout(Some(HANDSHAKE_TIMEOUT))?;
    ch.send(&Frame::new(MsgType::AaKeyReq, req.round(), codec::encode_aa_request(req)))?;
    let f = ch.recv()?;
    match f.msg_type {
        MsgType::AaKeyResp => Ok(codec::decode_aa_response(f.round_id, &f.payload)?),
        MsgType::AaReject => Err(TransportError::Rejected(codec::decode_rejection(&f.payload)?)),
        got => Err(TransportError::Unexpected {
            expected: MsgType::AaKeyResp,
            got,
        }),
    }
}

/// Key source backed by a remote authority.
#[derive(Debug, Clone)]
pub struct RemoteAuthority<C> {
    conn: C,
}

impl<C: Connector> RemoteAuthority<C> {
    pub fn new(conn: C) -> Self {
        Self { conn }
    }
}

impl<C: Connector> KeySource for RemoteAuthority<C> {
    fn request_key(&mut self, req: &KeyRequest) -> Result<AttributeSecretKey, KeyError> {
        match authority_call(&self.conn, &AaRequest::Key(*req)) {
            Ok(AaResponse::Key(sk)) if sk.attribute() == req.attribute => Ok(sk),
            Ok(_) => Err(KeyError::Transport("authority answered with the wrong key".into())),
            Err(TransportError::Rejected(r)) => Err(KeyError::Rejected(r)),
            Err(e) => Err(KeyError::Transport(e.to_string())),
        }
    }
}

impl<C: Connector> AttributePublisher for RemoteAuthority<C> {
    fn publish(&mut self, notice: &RoundNotice) -> Result<Vec<AttributePublicKey>, PublishError> {
        match authority_call(&self.conn, &AaRequest::Directory(*notice)) {
            Ok(AaResponse::Directory(keys)) if keys.len() == notice.buffer_size as usize => Ok(keys),
            Ok(_) => Err(PublishError::Transport("authority answered with a malformed directory".into())),
            Err(TransportError::Rejected(r)) => Err(PublishError::Rejected(r)),
            Err(e) => Err(PublishError::Transport(e.to_string())),
        }
    }
}

fn handle_authority_session<Ch: FrameChannel>(aa: &AttributeAuthority, mut ch: Ch) -> Result<(), TransportError> {
    ch.set_recv_timeout(Some(HANDSHAKE_TIMEOUT))?;
    let f = ch.expect(MsgType::AaKeyReq)?;
    let req = codec::decode_aa_request(f.round_id, &f.payload)?;
    let (round, answer) = match req {
        AaRequest::Key(k) => (k.attribute.round, aa.serve(&k).map(AaResponse::Key)),
        AaRequest::Directory(n) => (n.round, aa.begin_round(&n).map(AaResponse::Directory)),
    };
    let frame = match answer {
        Ok(resp) => Frame::new(MsgType::AaKeyResp, round, codec::encode_aa_response(&resp)),
        Err(rej) => Frame::new(MsgType::AaReject, round, codec::encode_rejection(&rej)),
    };
    ch.send(&frame)
}

/// Serves authority requests until `stop` is raised. Each session carries
/// one request and is handled on its own thread.
pub fn serve_authority<A: Acceptor>(
    aa: Arc<AttributeAuthority>,
    mut acceptor: A,
    stop: &AtomicBool,
) -> Result<(), TransportError> {
    while !stop.load(Ordering::Relaxed) {
        if let Some(ch) = acceptor.accept_timeout(POLL)? {
            let aa = Arc::clone(&aa);
            thread::spawn(move || {
                let _ = handle_authority_session(&aa, ch);
            });
        }
    }
    Ok(())
}

/// Global model as shipped to users.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSnapshot {
    pub timestamp: u64,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct ServeOptions {
    /// Number of committed rounds after which the server stops.
    pub rounds: u64,
    /// Give up if no user joins for this long.
    pub idle_limit: Duration,
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("no user joined within {0:?}")]
    Idle(Duration),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Server(#[from] ServerError),
}

/// Per-session outcomes, for logging and tests.
#[derive(Debug, Clone, PartialEq)]
pub enum SessionOutcome {
    Committed { slot: u32, upload: Vec<u8> },
    TimedOut { slot: u32 },
    Dropped { slot: u32 },
    Rejected { slot: u32, reason: String },
}

fn dispatch<A: Acceptor>(
    mut acceptor: A,
    model: Arc<Mutex<ModelSnapshot>>,
    joins: mpsc::Sender<A::Channel>,
    stop: Arc<AtomicBool>,
) {
    while !stop.load(Ordering::Relaxed) {
        let ch = match acceptor.accept_timeout(POLL) {
            Ok(Some(ch)) => ch,
            Ok(None) => continue,
            Err(_) => return,
        };
        let model = Arc::clone(&model);
        let joins = joins.clone();
        thread::spawn(move || {
            let mut ch = ch;
            let _ = (|| -> Result<(), TransportError> {
                ch.set_recv_timeout(Some(HANDSHAKE_TIMEOUT))?;
                let f = ch.expect(MsgType::Connect)?;
                match codec::decode_connect(&f.payload)? {
                    ConnectIntent::PullModel => {
                        let m = model.lock().expect("model lock poisoned").clone();
                        ch.send(&Frame::new(MsgType::ModelPush, m.timestamp, codec::encode_model(&m.weights)))
                    }
                    ConnectIntent::Join => joins.send(ch).map_err(|_| TransportError::Closed),
                }
            })();
        });
    }
}

/// Runs the serial server over `acceptor` until `opts.rounds` rounds have
/// committed. Model pulls are answered concurrently; joins are admitted
/// one at a time. `on_round` sees every result and may update the model
/// handed to subsequent pulls.
pub fn run_server<A, P, F>(
    mut server: BasaServer<P>,
    acceptor: A,
    model: ModelSnapshot,
    opts: ServeOptions,
    mut on_round: F,
    mut on_session: impl FnMut(&SessionOutcome),
) -> Result<Vec<RoundResult>, ServeError>
where
    A: Acceptor + Send + 'static,
    P: AttributePublisher,
    F: FnMut(&RoundResult, &mut ModelSnapshot),
{
    let model = Arc::new(Mutex::new(model));
    let stop = Arc::new(AtomicBool::new(false));
    let (join_tx, join_rx) = mpsc::channel();
    let dispatcher = {
        let (model, stop) = (Arc::clone(&model), Arc::clone(&stop));
        thread::spawn(move || dispatch(acceptor, model, join_tx, stop))
    };
    let start = Instant::now();
    let now = || Micros(start.elapsed().as_micros() as u64);
    let modulus = server.config().modulus;
    let mut results = Vec::new();

    let outcome = (|| -> Result<(), ServeError> {
        while (results.len() as u64) < opts.rounds {
            let mut ch = match join_rx.recv_timeout(opts.idle_limit) {
                Ok(ch) => ch,
                Err(RecvTimeoutError::Timeout) => return Err(ServeError::Idle(opts.idle_limit)),
                Err(RecvTimeoutError::Disconnected) => return Err(TransportError::Closed.into()),
            };
            let grant = server.on_connect(now())?;
            let slot = grant.slot;
            if ch.send(&Frame::new(MsgType::SlotGrant, grant.round_id, codec::encode_grant(&grant))).is_err() {
                server.abort_pending();
                on_session(&SessionOutcome::Dropped { slot });
                continue;
            }
            let remaining = Duration::from_micros(grant.deadline.saturating_sub(now()).0);
            let received = ch
                .set_recv_timeout(Some(remaining))
                .and_then(|_| ch.expect(MsgType::Upload))
                .and_then(|f| {
                    let up = codec::decode_upload(&f.payload, modulus)?;
                    Ok((f.payload, up))
                });
            let (bytes, up) = match received {
                Ok(v) => v,
                Err(TransportError::Timeout) => {
                    server.on_timeout(grant.deadline);
                    let _ = ch.send(&Frame::new(MsgType::Abort, grant.round_id, codec::encode_abort(AbortReason::Timeout)));
                    on_session(&SessionOutcome::TimedOut { slot });
                    continue;
                }
                Err(_) => {
                    server.abort_pending();
                    on_session(&SessionOutcome::Dropped { slot });
                    continue;
                }
            };
            match server.on_upload(up) {
                Ok(result) => {
                    on_session(&SessionOutcome::Committed { slot, upload: bytes });
                    if let Some(r) = result {
                        let mut m = model.lock().expect("model lock poisoned");
                        on_round(&r, &mut m);
                        results.push(r);
                    }
                }
                Err(ServerError::Violation(v)) => {
                    let _ = ch.send(&Frame::new(MsgType::Abort, grant.round_id, codec::encode_abort(AbortReason::Violation)));
                    on_session(&SessionOutcome::Rejected {
                        slot,
                        reason: v.to_string(),
                    });
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(())
    })();
    stop.store(true, Ordering::Relaxed);
    let _ = dispatcher.join();
    outcome.map(|_| results)
}

#[derive(Debug, Error)]
pub enum SessionError<E: std::error::Error + 'static> {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("user procedure failed: {0}")]
    User(#[source] E),
}

/// Fetches the current global model.
pub fn pull_model<C: Connector>(server: &C) -> Result<ModelSnapshot, TransportError> {
    let mut ch = server.connect()?;
    ch.set_recv_timeout(Some(HANDSHAKE_TIMEOUT))?;
    ch.send(&Frame::new(MsgType::Connect, 0, codec::encode_connect(ConnectIntent::PullModel)))?;
    let f = ch.expect(MsgType::ModelPush)?;
    Ok(ModelSnapshot {
        timestamp: f.round_id,
        weights: codec::decode_model(&f.payload)?,
    })
}

/// Joins the buffer, waits up to `admission_wait` for a slot, runs `mask`
/// on the grant and uploads the result. Returns the grant and the exact
/// upload payload sent.
pub fn join_and_upload<C, E, F>(
    server: &C,
    admission_wait: Duration,
    mask: F,
) -> Result<(SlotGrant, Vec<u8>), SessionError<E>>
where
    C: Connector,
    E: std::error::Error + 'static,
    F: FnOnce(&SlotGrant) -> Result<UploadMsg, E>,
{
    let mut ch = server.connect()?;
    ch.send(&Frame::new(MsgType::Connect, 0, codec::encode_connect(ConnectIntent::Join)))?;
    ch.set_recv_timeout(Some(admission_wait))?;
    let f = ch.recv()?;
    let grant = match f.msg_type {
        MsgType::SlotGrant => codec::decode_grant(f.round_id, &f.payload).map_err(TransportError::from)?,
        MsgType::Abort => return Err(TransportError::Aborted(codec::decode_abort(&f.payload).map_err(TransportError::from)?).into()),
        got => {
            return Err(TransportError::Unexpected {
                expected: MsgType::SlotGrant,
                got,
            }
            .into())
        }
    };
    // On failure the session is dropped, which the server treats as an abort.
    let up = mask(&grant).map_err(SessionError::User)?;
    let payload = codec::encode_upload(&up);
    ch.send(&Frame::new(MsgType::Upload, grant.round_id, payload.clone()))?;
    Ok((grant, payload))
}
