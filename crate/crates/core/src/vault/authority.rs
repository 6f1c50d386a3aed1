//! The attribute authority: publishes per-round attribute public keys and
//! issues attribute secret keys to users holding a server-endorsed grant.
//!
//! The server and the authority share a [`LinkKey`]. The server signs a
//! [`RoundNotice`] when it regenerates the attribute set and mints a
//! [`GrantToken`] for each slot grant; the authority checks both without
//! further interaction. Grant tokens carry a sequence number, and for each
//! `(round, slot)` only the most recent grant is honoured: a user whose grant
//! was superseded after a timeout cannot obtain the key any more.

use std::collections::HashMap;
use std::sync::Mutex;

use hmac::{Hmac, KeyInit, Mac};
use rand::CryptoRng;
use sha2::Sha256;
use thiserror::Error;

use super::{keygen, Attribute, AttributePublicKey, AttributeSecretKey, MasterKey, PublicParams};

pub const TAG_LEN: usize = 16;

/// Secret shared between the server and the authority.
#[derive(Clone, PartialEq, Eq)]
pub struct LinkKey([u8; 32]);

impl LinkKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }

    pub fn random<R: CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; 32];
        rng.fill_bytes(&mut b);
        Self(b)
    }

    pub fn as_bytes(&self) -> &[u8; 32] {
        &self.0
    }

    fn mac(&self, label: &[u8], body: &[u8]) -> Hmac<Sha256> {
        let mut mac = <Hmac<Sha256> as KeyInit>::new_from_slice(&self.0).expect("any key length");
        mac.update(label);
        mac.update(body);
        mac
    }

    fn tag(&self, label: &[u8], body: &[u8]) -> [u8; TAG_LEN] {
        let full = self.mac(label, body).finalize().into_bytes();
        full[..TAG_LEN].try_into().expect("sha256 output is 32 bytes")
    }

    fn verify(&self, label: &[u8], body: &[u8], tag: &[u8; TAG_LEN]) -> bool {
        self.mac(label, body).verify_truncated_left(tag).is_ok()
    }
}

impl std::fmt::Debug for LinkKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("LinkKey(..)")
    }
}

fn grant_body(attr: Attribute, seq: u64) -> [u8; 20] {
    let mut b = [0u8; 20];
    b[..8].copy_from_slice(&attr.round.to_be_bytes());
    b[8..12].copy_from_slice(&attr.slot.to_be_bytes());
    b[12..].copy_from_slice(&seq.to_be_bytes());
    b
}

/// Server-minted credential naming the requester of one slot key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GrantToken {
    pub seq: u64,
    pub tag: [u8; TAG_LEN],
}

impl GrantToken {
    pub fn mint(link: &LinkKey, attr: Attribute, seq: u64) -> Self {
        Self {
            seq,
            tag: link.tag(b"basa/grant", &grant_body(attr, seq)),
        }
    }

    pub fn verify(&self, link: &LinkKey, attr: Attribute) -> bool {
        link.verify(b"basa/grant", &grant_body(attr, self.seq), &self.tag)
    }
}

/// Server-signed announcement that round `round` with `buffer_size` slots
/// has started.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundNotice {
    pub round: u64,
    pub buffer_size: u32,
    pub tag: [u8; TAG_LEN],
}

impl RoundNotice {
    pub fn sign(link: &LinkKey, round: u64, buffer_size: u32) -> Self {
        Self {
            round,
            buffer_size,
            tag: link.tag(b"basa/round", &Self::body(round, buffer_size)),
        }
    }

    fn body(round: u64, buffer_size: u32) -> [u8; 12] {
        let mut b = [0u8; 12];
        b[..8].copy_from_slice(&round.to_be_bytes());
        b[8..].copy_from_slice(&buffer_size.to_be_bytes());
        b
    }

    fn verify(&self, link: &LinkKey) -> bool {
        link.verify(b"basa/round", &Self::body(self.round, self.buffer_size), &self.tag)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KeyRequest {
    pub attribute: Attribute,
    pub token: GrantToken,
}

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum AaRejection {
    #[error("grant token not endorsed by the server")]
    InvalidToken,
    #[error("round notice not signed by the server")]
    InvalidNotice,
    #[error("no round has been announced")]
    NoActiveRound,
    #[error("round {requested} is not the current round {current}")]
    StaleRound { requested: u64, current: u64 },
    #[error("slot {slot} outside buffer of size {buffer_size}")]
    SlotOutOfRange { slot: u32, buffer_size: u32 },
    #[error("slot already claimed by a newer or different grant")]
    SlotClaimed,
}

impl AaRejection {
    pub fn code(&self) -> u8 {
        match self {
            Self::InvalidToken => 1,
            Self::InvalidNotice => 2,
            Self::NoActiveRound => 3,
            Self::StaleRound { .. } => 4,
            Self::SlotOutOfRange { .. } => 5,
            Self::SlotClaimed => 6,
        }
    }
}

#[derive(Debug, Default)]
struct Registry {
    round: Option<u64>,
    buffer_size: u32,
    claims: HashMap<u32, GrantToken>,
}

/// Trusted key-issuing service. Safe to share between threads; every request
/// updates the claim registry atomically.
#[derive(Debug)]
pub struct AttributeAuthority {
    pp: PublicParams,
    mk: MasterKey,
    link: LinkKey,
    registry: Mutex<Registry>,
}

impl AttributeAuthority {
    pub fn new(pp: PublicParams, mk: MasterKey, link: LinkKey) -> Self {
        Self {
            pp,
            mk,
            link,
            registry: Mutex::new(Registry::default()),
        }
    }

    pub fn public_params(&self) -> &PublicParams {
        &self.pp
    }

    pub fn current_round(&self) -> Option<u64> {
        self.registry.lock().expect("registry poisoned").round
    }

    /// Advances the authority to a new round and returns the public keys of
    /// its attribute set. Re-announcing the current round is idempotent.
    pub fn begin_round(&self, notice: &RoundNotice) -> Result<Vec<AttributePublicKey>, AaRejection> {
        if !notice.verify(&self.link) {
            return Err(AaRejection::InvalidNotice);
        }
        let mut reg = self.registry.lock().expect("registry poisoned");
        match reg.round {
            Some(current) if notice.round < current => {
                return Err(AaRejection::StaleRound {
                    requested: notice.round,
                    current,
                })
            }
            Some(current) if notice.round == current => {}
            _ => {
                reg.round = Some(notice.round);
                reg.claims.clear();
            }
        }
        reg.buffer_size = notice.buffer_size;
        drop(reg);
        Ok((0..notice.buffer_size)
            .map(|slot| keygen(&self.pp, &self.mk, Attribute::new(notice.round, slot)).public_key())
            .collect())
    }

    /// Issues the secret key for `req.attribute` if the request carries the
    /// latest grant the server minted for that slot in the current round.
    pub fn serve(&self, req: &KeyRequest) -> Result<AttributeSecretKey, AaRejection> {
        if !req.token.verify(&self.link, req.attribute) {
            return Err(AaRejection::InvalidToken);
        }
        let mut reg = self.registry.lock().expect("registry poisoned");
        let current = reg.round.ok_or(AaRejection::NoActiveRound)?;
        if req.attribute.round != current {
            return Err(AaRejection::StaleRound {
                requested: req.attribute.round,
                current,
            });
        }
        if req.attribute.slot >= reg.buffer_size {
            return Err(AaRejection::SlotOutOfRange {
                slot: req.attribute.slot,
                buffer_size: reg.buffer_size,
            });
        }
        match reg.claims.get(&req.attribute.slot) {
            Some(held) if held.seq > req.token.seq => return Err(AaRejection::SlotClaimed),
            Some(held) if held.seq == req.token.seq && held != &req.token => {
                return Err(AaRejection::SlotClaimed)
            }
            _ => {}
        }
        reg.claims.insert(req.attribute.slot, req.token);
        drop(reg);
        Ok(keygen(&self.pp, &self.mk, req.attribute))
    }
}
