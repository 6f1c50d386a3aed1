use std::sync::Arc;

use rand::CryptoRng;
use thiserror::Error;

use super::messages::{RoundResult, SlotGrant, UploadMsg};
use crate::field::{dequantize, quantize, FieldError, FieldVector, QuantizerConfig};
use crate::prg::{add_mask, sub_mask, Seed};
use crate::scalar::Real;
use crate::staleness::{FutureTimestamp, StalenessFn};
use crate::vault::{
    decrypt, AaRejection, Attribute, AttributeAuthority, AttributeSecretKey, KeyRequest, Sealer,
    PublicParams,
};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum KeyError {
    #[error("authority rejected the key request: {0}")]
    Rejected(AaRejection),
    #[error("authority unreachable: {0}")]
    Transport(String),
}

/// Where a user obtains its slot key.
pub trait KeySource {
    fn request_key(&mut self, req: &KeyRequest) -> Result<AttributeSecretKey, KeyError>;
}

impl KeySource for &AttributeAuthority {
    fn request_key(&mut self, req: &KeyRequest) -> Result<AttributeSecretKey, KeyError> {
        self.serve(req).map_err(KeyError::Rejected)
    }
}

impl KeySource for Arc<AttributeAuthority> {
    fn request_key(&mut self, req: &KeyRequest) -> Result<AttributeSecretKey, KeyError> {
        self.serve(req).map_err(KeyError::Rejected)
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum UserError {
    #[error("malformed slot grant: {0}")]
    MalformedGrant(&'static str),
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error("could not open the seed sealed by slot {origin}")]
    Decrypt { origin: u32 },
    #[error(transparent)]
    Staleness(#[from] FutureTimestamp),
}

/// What a user knows after masking: its quantized input and every seed it
/// opened or generated. Colluding users hand this to the server.
#[derive(Debug, Clone, PartialEq)]
pub struct UserSecrets {
    pub slot: u32,
    pub quantized: FieldVector,
    /// `(origin slot, seed)` for each incoming ciphertext.
    pub incoming: Vec<(u32, Seed)>,
    /// `(target slot, seed)` for each later slot.
    pub outgoing: Vec<(u32, Seed)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedUpload {
    pub upload: UploadMsg,
    pub secrets: UserSecrets,
}

fn check_grant(grant: &SlotGrant) -> Result<(), UserError> {
    let k = grant.buffer_size();
    if grant.slot >= k {
        return Err(UserError::MalformedGrant("slot outside the buffer"));
    }
    for (j, pk) in grant.attributes.iter().enumerate() {
        if pk.attribute != Attribute::new(grant.round_id, j as u32) {
            return Err(UserError::MalformedGrant("attribute set is not for this round"));
        }
    }
    if grant.incoming.len() != grant.slot as usize {
        return Err(UserError::MalformedGrant("one incoming ciphertext per earlier slot expected"));
    }
    let own = Attribute::new(grant.round_id, grant.slot);
    let mut seen = vec![false; grant.slot as usize];
    for ct in &grant.incoming {
        if ct.attribute != own || ct.origin >= grant.slot || seen[ct.origin as usize] {
            return Err(UserError::MalformedGrant("incoming ciphertext misaddressed"));
        }
        seen[ct.origin as usize] = true;
    }
    Ok(())
}

/// Masks an already quantized input for the granted slot.
///
/// Aborts without producing an upload if the key cannot be obtained or any
/// incoming seed fails to open; a partially unmasked vector would break
/// cancellation for the whole round.
pub fn mask_input<K, R>(
    quantized: FieldVector,
    staleness: f64,
    grant: &SlotGrant,
    pp: &PublicParams,
    keys: &mut K,
    rng: &mut R,
) -> Result<MaskedUpload, UserError>
where
    K: KeySource + ?Sized,
    R: CryptoRng + ?Sized,
{
    check_grant(grant)?;
    let own = Attribute::new(grant.round_id, grant.slot);
    let sk = keys.request_key(&KeyRequest {
        attribute: own,
        token: grant.token,
    })?;

    let mut masked = quantized.clone();
    let mut incoming = Vec::with_capacity(grant.incoming.len());
    for ct in &grant.incoming {
        let seed = decrypt(pp, ct, &sk).map_err(|_| UserError::Decrypt { origin: ct.origin })?;
        sub_mask(&mut masked, &seed);
        incoming.push((ct.origin, seed));
    }

    let later = &grant.attributes[grant.slot as usize + 1..];
    let mut outgoing = Vec::with_capacity(later.len());
    let mut sealed = Vec::with_capacity(later.len());
    if !later.is_empty() {
        let sealer = Sealer::new(rng);
        for pk in later {
            let seed = Seed::random(rng);
            add_mask(&mut masked, &seed);
            sealed.push(sealer.seal(pp, pk, &seed, grant.slot, rng));
            outgoing.push((pk.attribute.slot, seed));
        }
    }

    Ok(MaskedUpload {
        upload: UploadMsg {
            masked_update: masked,
            staleness,
            outgoing: sealed,
        },
        secrets: UserSecrets {
            slot: grant.slot,
            quantized,
            incoming,
            outgoing,
        },
    })
}

/// Full user procedure, returning the secrets alongside the upload.
#[allow(clippy::too_many_arguments)]
pub fn user_run_detailed<T, K, R>(
    update: &[T],
    local_timestamp: u64,
    grant: &SlotGrant,
    pp: &PublicParams,
    keys: &mut K,
    cfg: &QuantizerConfig<T>,
    staleness_fn: &StalenessFn,
    rng: &mut R,
) -> Result<MaskedUpload, UserError>
where
    T: Real,
    K: KeySource + ?Sized,
    R: CryptoRng + ?Sized,
{
    check_grant(grant)?;
    let alpha = staleness_fn.factor(grant.round_id, local_timestamp)?;
    let weight = T::of(alpha);
    let weighted: Vec<T> = update.iter().map(|&v| v * weight).collect();
    let quantized = quantize(&weighted, cfg, rng);
    mask_input(quantized, alpha, grant, pp, keys, rng)
}

/// Computes `alpha = S(t - tau)`, quantizes `alpha * update` and masks it for
/// the granted slot.
#[allow(clippy::too_many_arguments)]
pub fn user_run<T, K, R>(
    update: &[T],
    local_timestamp: u64,
    grant: &SlotGrant,
    pp: &PublicParams,
    keys: &mut K,
    cfg: &QuantizerConfig<T>,
    staleness_fn: &StalenessFn,
    rng: &mut R,
) -> Result<UploadMsg, UserError>
where
    T: Real,
    K: KeySource + ?Sized,
    R: CryptoRng + ?Sized,
{
    user_run_detailed(update, local_timestamp, grant, pp, keys, cfg, staleness_fn, rng).map(|m| m.upload)
}

/// Staleness-weighted mean of a round: `dequantize(sum) / sum(alpha)`.
pub fn unmask_aggregate<T: Real>(result: &RoundResult, cfg: &QuantizerConfig<T>) -> Result<Vec<T>, FieldError> {
    if result.staleness_total.is_nan() || result.staleness_total <= 0.0 {
        return Err(FieldError::InvalidDivisor);
    }
    dequantize(&result.aggregate, cfg, T::of(result.staleness_total))
}
