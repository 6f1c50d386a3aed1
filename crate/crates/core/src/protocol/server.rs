use std::sync::Arc;

use thiserror::Error;

use super::messages::{RoundResult, SlotGrant, UploadMsg};
use crate::field::{FieldVector, Modulus};
use crate::time::Micros;
use crate::vault::{
    AaRejection, Attribute, AttributeAuthority, AttributePublicKey, GrantToken, LinkKey,
    RoundNotice, SealedSeed, SEALED_BLOB_LEN,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ServerConfig {
    pub buffer_size: u32,
    pub dim: usize,
    pub modulus: Modulus,
    pub timeout: Micros,
}

impl ServerConfig {
    pub const DEFAULT_TIMEOUT: Micros = Micros(30_000_000);

    pub fn new(buffer_size: u32, dim: usize) -> Self {
        assert!(buffer_size >= 1, "buffer size must be at least 1");
        Self {
            buffer_size,
            dim,
            modulus: Modulus::default(),
            timeout: Self::DEFAULT_TIMEOUT,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PublishError {
    #[error("authority rejected the round notice: {0}")]
    Rejected(AaRejection),
    #[error("authority unreachable: {0}")]
    Transport(String),
}

/// Where the server obtains the attribute public keys of a new round.
pub trait AttributePublisher {
    fn publish(&mut self, notice: &RoundNotice) -> Result<Vec<AttributePublicKey>, PublishError>;
}

impl AttributePublisher for &AttributeAuthority {
    fn publish(&mut self, notice: &RoundNotice) -> Result<Vec<AttributePublicKey>, PublishError> {
        self.begin_round(notice).map_err(PublishError::Rejected)
    }
}

impl AttributePublisher for Arc<AttributeAuthority> {
    fn publish(&mut self, notice: &RoundNotice) -> Result<Vec<AttributePublicKey>, PublishError> {
        self.begin_round(notice).map_err(PublishError::Rejected)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProtocolViolation {
    #[error("masked update has dimension {got}, expected {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("masked update is over modulus {got}, expected {expected}")]
    Modulus { expected: u32, got: u32 },
    #[error("staleness weight {0} is not a positive finite number")]
    Staleness(f64),
    #[error("expected {expected} outgoing ciphertexts, got {got}")]
    CiphertextCount { expected: usize, got: usize },
    #[error("ciphertext {index} is misaddressed")]
    Misaddressed { index: usize },
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServerError {
    #[error("a slot grant is already in flight")]
    Busy,
    #[error("round is complete and waiting for a new attribute set")]
    RoundComplete,
    #[error("no slot grant is in flight")]
    NoPendingGrant,
    #[error("protocol violation: {0}")]
    Violation(#[from] ProtocolViolation),
    #[error(transparent)]
    Publish(#[from] PublishError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingGrant {
    pub slot: u32,
    pub token: GrantToken,
    pub deadline: Micros,
}

/// Server-side buffer state of the current round.
#[derive(Debug, Clone)]
pub struct RoundState {
    pub round_id: u64,
    pub cursor: u32,
    pub accumulator: FieldVector,
    pub staleness_sum: f64,
    pub buffers: Vec<Vec<SealedSeed>>,
    pub attributes: Vec<AttributePublicKey>,
    pub pending: Option<PendingGrant>,
}

impl RoundState {
    fn fresh(config: &ServerConfig, round_id: u64, attributes: Vec<AttributePublicKey>) -> Self {
        Self {
            round_id,
            cursor: 0,
            accumulator: FieldVector::zeros(config.dim, config.modulus),
            staleness_sum: 0.0,
            buffers: vec![Vec::new(); config.buffer_size as usize],
            attributes,
            pending: None,
        }
    }

    pub fn buffer_size(&self) -> u32 {
        self.buffers.len() as u32
    }

    /// Checks the structural invariants of the buffer. Returns a description
    /// of the first broken one.
    pub fn check_invariants(&self) -> Result<(), String> {
        let k = self.buffer_size();
        if self.cursor > k {
            return Err(format!("cursor {} exceeds buffer size {k}", self.cursor));
        }
        for (j, buf) in self.buffers.iter().enumerate() {
            if buf.len() > self.cursor as usize {
                return Err(format!("C_{j} holds {} > cursor {}", buf.len(), self.cursor));
            }
            for ct in buf {
                if ct.attribute != Attribute::new(self.round_id, j as u32) || ct.origin >= j as u32 {
                    return Err(format!("C_{j} holds a misaddressed ciphertext"));
                }
            }
        }
        if let Some(p) = &self.pending {
            if p.slot != self.cursor {
                return Err("pending grant is not for the cursor slot".into());
            }
        }
        Ok(())
    }
}

/// The serial server engine: at most one grant in flight, state transitions
/// applied in call order.
#[derive(Debug)]
pub struct BasaServer<P> {
    config: ServerConfig,
    link: LinkKey,
    publisher: P,
    state: RoundState,
    next_seq: u64,
}

impl<P: AttributePublisher> BasaServer<P> {
    /// Starts at round `round_id`, announcing it to the authority.
    pub fn new(config: ServerConfig, link: LinkKey, mut publisher: P, round_id: u64) -> Result<Self, PublishError> {
        let attributes = publisher.publish(&RoundNotice::sign(&link, round_id, config.buffer_size))?;
        let state = RoundState::fresh(&config, round_id, attributes);
        Ok(Self {
            config,
            link,
            publisher,
            state,
            next_seq: 1,
        })
    }

    pub fn config(&self) -> &ServerConfig {
        &self.config
    }

    pub fn state(&self) -> &RoundState {
        &self.state
    }

    pub fn is_busy(&self) -> bool {
        self.state.pending.is_some()
    }

    /// Admits a connecting user into the cursor slot.
    pub fn on_connect(&mut self, now: Micros) -> Result<SlotGrant, ServerError> {
        if self.state.pending.is_some() {
            return Err(ServerError::Busy);
        }
        if self.state.cursor >= self.config.buffer_size {
            return Err(ServerError::RoundComplete);
        }
        let slot = self.state.cursor;
        let token = GrantToken::mint(&self.link, Attribute::new(self.state.round_id, slot), self.next_seq);
        self.next_seq += 1;
        let deadline = now + self.config.timeout;
        self.state.pending = Some(PendingGrant { slot, token, deadline });
        Ok(SlotGrant {
            round_id: self.state.round_id,
            slot,
            attributes: self.state.attributes.clone(),
            incoming: self.state.buffers[slot as usize].clone(),
            token,
            deadline,
        })
    }

    /// Aborts the in-flight grant once its deadline has passed. The slot and
    /// its incoming ciphertexts are offered unchanged to the next user.
    pub fn on_timeout(&mut self, now: Micros) -> bool {
        match self.state.pending {
            Some(p) if now >= p.deadline => {
                self.state.pending = None;
                true
            }
            _ => false,
        }
    }

    /// Aborts the in-flight grant immediately (connection lost).
    pub fn abort_pending(&mut self) -> bool {
        self.state.pending.take().is_some()
    }

    fn validate(&self, slot: u32, up: &UploadMsg) -> Result<(), ProtocolViolation> {
        let m = &up.masked_update;
        if m.modulus() != self.config.modulus {
            return Err(ProtocolViolation::Modulus {
                expected: self.config.modulus.get(),
                got: m.modulus().get(),
            });
        }
        if m.dim() != self.config.dim {
            return Err(ProtocolViolation::Dimension {
                expected: self.config.dim,
                got: m.dim(),
            });
        }
        if !(up.staleness.is_finite() && up.staleness > 0.0) {
            return Err(ProtocolViolation::Staleness(up.staleness));
        }
        let expected = (self.config.buffer_size - slot - 1) as usize;
        if up.outgoing.len() != expected {
            return Err(ProtocolViolation::CiphertextCount {
                expected,
                got: up.outgoing.len(),
            });
        }
        for (index, ct) in up.outgoing.iter().enumerate() {
            let target = Attribute::new(self.state.round_id, slot + 1 + index as u32);
            if ct.attribute != target || ct.origin != slot || ct.ciphertext.len() != SEALED_BLOB_LEN {
                return Err(ProtocolViolation::Misaddressed { index });
            }
        }
        Ok(())
    }

    /// Buffers the upload of the in-flight grant. A violation aborts the
    /// grant without consuming the slot. When the buffer fills, returns the
    /// round result and moves to the next round with a fresh attribute set.
    pub fn on_upload(&mut self, up: UploadMsg) -> Result<Option<RoundResult>, ServerError> {
        if self.state.cursor >= self.config.buffer_size {
            return Err(ServerError::RoundComplete);
        }
        let pending = self.state.pending.take().ok_or(ServerError::NoPendingGrant)?;
        self.validate(pending.slot, &up)?;
        let UploadMsg {
            masked_update,
            staleness,
            outgoing,
        } = up;
        self.state
            .accumulator
            .add_assign(&masked_update)
            .expect("validated dimension and modulus");
        self.state.staleness_sum += staleness;
        for ct in outgoing {
            self.state.buffers[ct.attribute.slot as usize].push(ct);
        }
        self.state.cursor += 1;
        if self.state.cursor < self.config.buffer_size {
            return Ok(None);
        }
        let result = RoundResult {
            aggregate: self.state.accumulator.clone(),
            staleness_total: self.state.staleness_sum,
            round_id: self.state.round_id,
            contributors: self.state.cursor,
        };
        self.regenerate()?;
        Ok(Some(result))
    }

    /// Starts the next round after a full buffer. Only needs calling
    /// directly when a previous attempt failed to reach the authority.
    pub fn regenerate(&mut self) -> Result<(), PublishError> {
        if self.state.cursor < self.config.buffer_size {
            return Ok(());
        }
        let next = self.state.round_id + 1;
        let attributes = self
            .publisher
            .publish(&RoundNotice::sign(&self.link, next, self.config.buffer_size))?;
        self.state = RoundState::fresh(&self.config, next, attributes);
        Ok(())
    }
}
