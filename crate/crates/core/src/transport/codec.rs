//! Payload layouts. All integers are big-endian; reals are IEEE-754 `f64`.
//!
//! | message       | payload                                                    |
//! |---------------|------------------------------------------------------------|
//! | CONNECT       | empty (join buffer) or intent `u8` (0 pull model, 1 join)  |
//! | SLOT_GRANT    | slot `u32`, K `u32`, deadline µs `u64`, token, K points, incoming count `u32`, sealed seeds |
//! | UPLOAD        | alpha `f64`, d `u32`, d × `u32`, count `u32`, sealed seeds |
//! | ABORT         | reason `u8`                                                |
//! | AA_KEY_REQ    | kind `u8`; 0: slot `u32`, token; 1: K `u32`, notice tag    |
//! | AA_KEY_RESP   | kind `u8`; 0: slot `u32`, secret; 1: K `u32`, K points     |
//! | AA_REJECT     | code `u8`, detail `u64`, detail `u32`                      |
//! | MODEL_PUSH    | count `u32`, count × `f64`                                 |
//!
//! A sealed seed is round `u64`, slot `u32`, origin `u32`, nonce (12 bytes),
//! ciphertext length `u32` and ciphertext. A token is seq `u64` and a 16-byte
//! tag. The round of every message travels in the frame header.

use thiserror::Error;

use crate::field::{FieldError, FieldVector, Modulus};
use crate::protocol::{SlotGrant, UploadMsg};
use crate::time::Micros;
use crate::vault::{
    AaRejection, Attribute, AttributePublicKey, AttributeSecretKey, GrantToken, KeyRequest, RoundNotice,
    SealedSeed, NONCE_LEN,
};

const TAG_LEN: usize = 16;
const POINT_LEN: usize = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum CodecError {
    #[error("payload ends early")]
    Truncated,
    #[error("{0} unexpected bytes after the payload")]
    Trailing(usize),
    #[error("unknown {what} {value}")]
    UnknownTag { what: &'static str, value: u8 },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("payload field out of range: {0}")]
    Invalid(&'static str),
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.buf.len() < n {
            return Err(CodecError::Truncated);
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CodecError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn u8(&mut self) -> Result<u8, CodecError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CodecError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64, CodecError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64, CodecError> {
        Ok(f64::from_be_bytes(self.array()?))
    }

    /// A count of items of at least `item_len` bytes each, checked against
    /// what is left so a hostile length cannot force a huge allocation.
    fn count(&mut self, item_len: usize) -> Result<usize, CodecError> {
        let n = self.u32()? as usize;
        if n.saturating_mul(item_len) > self.buf.len() {
            return Err(CodecError::Truncated);
        }
        Ok(n)
    }

    fn finish(self) -> Result<(), CodecError> {
        match self.buf.len() {
            0 => Ok(()),
            n => Err(CodecError::Trailing(n)),
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_be_bytes());
}

fn len_u32(n: usize) -> u32 {
    u32::try_from(n).expect("length fits in 32 bits")
}

pub const SEALED_HEADER_LEN: usize = 8 + 4 + 4 + NONCE_LEN + 4;

pub fn put_sealed(out: &mut Vec<u8>, s: &SealedSeed) {
    put_u64(out, s.attribute.round);
    put_u32(out, s.attribute.slot);
    put_u32(out, s.origin);
    out.extend_from_slice(&s.nonce);
    put_u32(out, len_u32(s.ciphertext.len()));
    out.extend_from_slice(&s.ciphertext);
}

fn get_sealed(r: &mut Reader<'_>) -> Result<SealedSeed, CodecError> {
    let round = r.u64()?;
    let slot = r.u32()?;
    let origin = r.u32()?;
    let nonce = r.array::<NONCE_LEN>()?;
    let len = r.count(1)?;
    Ok(SealedSeed {
        attribute: Attribute::new(round, slot),
        origin,
        nonce,
        ciphertext: r.take(len)?.to_vec(),
    })
}

fn get_sealed_list(r: &mut Reader<'_>) -> Result<Vec<SealedSeed>, CodecError> {
    let n = r.count(SEALED_HEADER_LEN)?;
    (0..n).map(|_| get_sealed(r)).collect()
}

fn put_token(out: &mut Vec<u8>, t: &GrantToken) {
    put_u64(out, t.seq);
    out.extend_from_slice(&t.tag);
}

fn get_token(r: &mut Reader<'_>) -> Result<GrantToken, CodecError> {
    Ok(GrantToken {
        seq: r.u64()?,
        tag: r.array::<TAG_LEN>()?,
    })
}

fn put_points(out: &mut Vec<u8>, keys: &[AttributePublicKey]) {
    for k in keys {
        out.extend_from_slice(&k.point);
    }
}

fn get_points(r: &mut Reader<'_>, round: u64, k: u32) -> Result<Vec<AttributePublicKey>, CodecError> {
    if (k as usize).saturating_mul(POINT_LEN) > r.buf.len() {
        return Err(CodecError::Truncated);
    }
    (0..k)
        .map(|j| {
            Ok(AttributePublicKey {
                attribute: Attribute::new(round, j),
                point: r.array::<POINT_LEN>()?,
            })
        })
        .collect()
}

/// Why a user wants to talk to the server.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum ConnectIntent {
    PullModel = 0,
    Join = 1,
}

/// A join is the header-only CONNECT; a model pull carries its intent byte.
pub fn encode_connect(intent: ConnectIntent) -> Vec<u8> {
    match intent {
        ConnectIntent::Join => Vec::new(),
        ConnectIntent::PullModel => vec![ConnectIntent::PullModel as u8],
    }
}

pub fn decode_connect(payload: &[u8]) -> Result<ConnectIntent, CodecError> {
    if payload.is_empty() {
        return Ok(ConnectIntent::Join);
    }
    let mut r = Reader::new(payload);
    let intent = match r.u8()? {
        0 => ConnectIntent::PullModel,
        1 => ConnectIntent::Join,
        value => return Err(CodecError::UnknownTag { what: "connect intent", value }),
    };
    r.finish()?;
    Ok(intent)
}

pub fn encode_grant(g: &SlotGrant) -> Vec<u8> {
    let mut out = Vec::new();
    put_u32(&mut out, g.slot);
    put_u32(&mut out, g.buffer_size());
    put_u64(&mut out, g.deadline.0);
    put_token(&mut out, &g.token);
    put_points(&mut out, &g.attributes);
    put_u32(&mut out, len_u32(g.incoming.len()));
    for s in &g.incoming {
        put_sealed(&mut out, s);
    }
    out
}

pub fn decode_grant(round_id: u64, payload: &[u8]) -> Result<SlotGrant, CodecError> {
    let mut r = Reader::new(payload);
    let slot = r.u32()?;
    let k = r.u32()?;
    let deadline = Micros(r.u64()?);
    let token = get_token(&mut r)?;
    let attributes = get_points(&mut r, round_id, k)?;
    let incoming = get_sealed_list(&mut r)?;
    r.finish()?;
    Ok(SlotGrant {
        round_id,
        slot,
        attributes,
        incoming,
        token,
        deadline,
    })
}

pub fn encode_upload(up: &UploadMsg) -> Vec<u8> {
    let elems = up.masked_update.elems();
    let mut out = Vec::with_capacity(16 + 4 * elems.len() + up.outgoing.len() * (SEALED_HEADER_LEN + 80));
    out.extend_from_slice(&up.staleness.to_be_bytes());
    put_u32(&mut out, len_u32(elems.len()));
    for &e in elems {
        put_u32(&mut out, e);
    }
    put_u32(&mut out, len_u32(up.outgoing.len()));
    for s in &up.outgoing {
        put_sealed(&mut out, s);
    }
    out
}

/// Decodes an upload; the modulus is a session parameter, not on the wire.
pub fn decode_upload(payload: &[u8], modulus: Modulus) -> Result<UploadMsg, CodecError> {
    let mut r = Reader::new(payload);
    let staleness = r.f64()?;
    let d = r.count(4)?;
    let elems = (0..d).map(|_| r.u32()).collect::<Result<Vec<_>, _>>()?;
    let masked_update = FieldVector::from_elems(elems, modulus)?;
    let outgoing = get_sealed_list(&mut r)?;
    r.finish()?;
    Ok(UploadMsg {
        masked_update,
        staleness,
        outgoing,
    })
}

/// Requests the authority understands.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AaRequest {
    Key(KeyRequest),
    Directory(RoundNotice),
}

impl AaRequest {
    pub fn round(&self) -> u64 {
        match self {
            AaRequest::Key(k) => k.attribute.round,
            AaRequest::Directory(n) => n.round,
        }
    }
}

pub fn encode_aa_request(req: &AaRequest) -> Vec<u8> {
    let mut out = Vec::new();
    match req {
        AaRequest::Key(k) => {
            out.push(0);
            put_u32(&mut out, k.attribute.slot);
            put_token(&mut out, &k.token);
        }
        AaRequest::Directory(n) => {
            out.push(1);
            put_u32(&mut out, n.buffer_size);
            out.extend_from_slice(&n.tag);
        }
    }
    out
}

pub fn decode_aa_request(round: u64, payload: &[u8]) -> Result<AaRequest, CodecError> {
    let mut r = Reader::new(payload);
    let req = match r.u8()? {
        0 => AaRequest::Key(KeyRequest {
            attribute: Attribute::new(round, r.u32()?),
            token: get_token(&mut r)?,
        }),
        1 => AaRequest::Directory(RoundNotice {
            round,
            buffer_size: r.u32()?,
            tag: r.array::<TAG_LEN>()?,
        }),
        value => return Err(CodecError::UnknownTag { what: "authority request", value }),
    };
    r.finish()?;
    Ok(req)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AaResponse {
    Key(AttributeSecretKey),
    Directory(Vec<AttributePublicKey>),
}

pub fn encode_aa_response(resp: &AaResponse) -> Vec<u8> {
    let mut out = Vec::new();
    match resp {
        AaResponse::Key(sk) => {
            out.push(0);
            put_u32(&mut out, sk.attribute().slot);
            out.extend_from_slice(&sk.to_bytes());
        }
        AaResponse::Directory(keys) => {
            out.push(1);
            put_u32(&mut out, len_u32(keys.len()));
            put_points(&mut out, keys);
        }
    }
    out
}

pub fn decode_aa_response(round: u64, payload: &[u8]) -> Result<AaResponse, CodecError> {
    let mut r = Reader::new(payload);
    let resp = match r.u8()? {
        0 => {
            let slot = r.u32()?;
            AaResponse::Key(AttributeSecretKey::from_parts(Attribute::new(round, slot), r.array()?))
        }
        1 => {
            let k = r.u32()?;
            AaResponse::Directory(get_points(&mut r, round, k)?)
        }
        value => return Err(CodecError::UnknownTag { what: "authority response", value }),
    };
    r.finish()?;
    Ok(resp)
}

pub fn encode_rejection(rej: &AaRejection) -> Vec<u8> {
    let (a, b) = match *rej {
        AaRejection::StaleRound { requested, current } => (requested, current.min(u32::MAX as u64) as u32),
        AaRejection::SlotOutOfRange { slot, buffer_size } => (slot as u64, buffer_size),
        _ => (0, 0),
    };
    let mut out = vec![rej.code()];
    put_u64(&mut out, a);
    put_u32(&mut out, b);
    out
}

pub fn decode_rejection(payload: &[u8]) -> Result<AaRejection, CodecError> {
    let mut r = Reader::new(payload);
    let code = r.u8()?;
    let a = r.u64()?;
    let b = r.u32()?;
    r.finish()?;
    Ok(match code {
        1 => AaRejection::InvalidToken,
        2 => AaRejection::InvalidNotice,
        3 => AaRejection::NoActiveRound,
        4 => AaRejection::StaleRound {
            requested: a,
            current: b as u64,
        },
        5 => AaRejection::SlotOutOfRange {
            slot: u32::try_from(a).map_err(|_| CodecError::Invalid("slot"))?,
            buffer_size: b,
        },
        6 => AaRejection::SlotClaimed,
        value => return Err(CodecError::UnknownTag { what: "rejection code", value }),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortReason {
    Timeout = 1,
    Violation = 2,
    Busy = 3,
    Shutdown = 4,
}

pub fn encode_abort(reason: AbortReason) -> Vec<u8> {
    vec![reason as u8]
}

pub fn decode_abort(payload: &[u8]) -> Result<AbortReason, CodecError> {
    let mut r = Reader::new(payload);
    let reason = match r.u8()? {
        1 => AbortReason::Timeout,
        2 => AbortReason::Violation,
        3 => AbortReason::Busy,
        4 => AbortReason::Shutdown,
        value => return Err(CodecError::UnknownTag { what: "abort reason", value }),
    };
    r.finish()?;
    Ok(reason)
}

pub fn encode_model(weights: &[f64]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 8 * weights.len());
    put_u32(&mut out, len_u32(weights.len()));
    for w in weights {
        out.extend_from_slice(&w.to_be_bytes());
    }
    out
}

pub fn decode_model(payload: &[u8]) -> Result<Vec<f64>, CodecError> {
    let mut r = Reader::new(payload);
    let n = r.count(8)?;
    let w = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    r.finish()?;
    Ok(w)
}
