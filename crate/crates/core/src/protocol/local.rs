use std::sync::Arc;

use rand::CryptoRng;
use thiserror::Error;

use super::collusion::{RoundTranscript, SlotRecord};
use super::messages::{RoundResult, SlotGrant};
use super::server::{BasaServer, PublishError, ServerConfig, ServerError};
use super::user::{mask_input, user_run_detailed, KeySource, MaskedUpload, UserError};
use crate::field::{FieldVector, QuantizerConfig};
use crate::scalar::Real;
use crate::staleness::StalenessFn;
use crate::time::Micros;
use crate::vault::{setup_with_rng, AttributeAuthority, KeyRequest, LinkKey, PublicParams};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LocalError {
    #[error(transparent)]
    Server(#[from] ServerError),
    #[error(transparent)]
    User(#[from] UserError),
}

/// Authority, server and users wired together in one process, with a
/// manual clock. Records a transcript of every committed slot.
#[derive(Debug)]
pub struct LocalDeployment {
    pp: PublicParams,
    authority: Arc<AttributeAuthority>,
    pub(super) server: BasaServer<Arc<AttributeAuthority>>,
    transcript: RoundTranscript,
    now: Micros,
}

impl LocalDeployment {
    pub fn new<R: CryptoRng + ?Sized>(config: ServerConfig, rng: &mut R) -> Result<Self, PublishError> {
        let (pp, mk) = setup_with_rng("local", rng);
        let link = LinkKey::random(rng);
        let authority = Arc::new(AttributeAuthority::new(pp.clone(), mk, link.clone()));
        let server = BasaServer::new(config, link, Arc::clone(&authority), 0)?;
        let transcript = RoundTranscript::new(0, config.buffer_size, config.dim, config.modulus);
        Ok(Self {
            pp,
            authority,
            server,
            transcript,
            now: Micros::ZERO,
        })
    }

    pub fn public_params(&self) -> &PublicParams {
        &self.pp
    }

    pub fn authority(&self) -> &Arc<AttributeAuthority> {
        &self.authority
    }

    pub fn server(&self) -> &BasaServer<Arc<AttributeAuthority>> {
        &self.server
    }

    pub fn now(&self) -> Micros {
        self.now
    }

    /// Transcript of the round in progress.
    pub fn transcript(&self) -> &RoundTranscript {
        &self.transcript
    }

    pub fn connect(&mut self) -> Result<SlotGrant, ServerError> {
        self.server.on_connect(self.now)
    }

    /// Uploads for the in-flight grant without recording a transcript entry.
    pub fn upload_raw(&mut self, up: super::messages::UploadMsg) -> Result<Option<RoundResult>, ServerError> {
        self.server.on_upload(up)
    }

    /// A user that is admitted and then vanishes. With `claim_key` it first
    /// obtains its slot key, as a user that dropped mid-run would have.
    pub fn drop_user(&mut self, claim_key: bool) -> Result<SlotGrant, LocalError> {
        let grant = self.connect()?;
        if claim_key {
            let mut aa = Arc::clone(&self.authority);
            aa.request_key(&KeyRequest {
                attribute: crate::vault::Attribute::new(grant.round_id, grant.slot),
                token: grant.token,
            })
            .map_err(UserError::from)?;
        }
        self.now = grant.deadline;
        let fired = self.server.on_timeout(self.now);
        debug_assert!(fired);
        Ok(grant)
    }

    /// Admits a user, masks an already quantized input and uploads it.
    pub fn submit_quantized<R: CryptoRng + ?Sized>(
        &mut self,
        quantized: FieldVector,
        alpha: f64,
        rng: &mut R,
    ) -> Result<Option<(RoundResult, RoundTranscript)>, LocalError> {
        let grant = self.connect()?;
        let mut aa = Arc::clone(&self.authority);
        let masked = mask_input(quantized, alpha, &grant, &self.pp, &mut aa, rng);
        self.finish(masked)
    }

    /// Admits a user and runs the full user procedure on a real update.
    pub fn submit_update<T: Real, R: CryptoRng + ?Sized>(
        &mut self,
        update: &[T],
        local_timestamp: u64,
        cfg: &QuantizerConfig<T>,
        staleness_fn: &StalenessFn,
        rng: &mut R,
    ) -> Result<Option<(RoundResult, RoundTranscript)>, LocalError> {
        let grant = self.connect()?;
        let mut aa = Arc::clone(&self.authority);
        let masked = user_run_detailed(update, local_timestamp, &grant, &self.pp, &mut aa, cfg, staleness_fn, rng);
        self.finish(masked)
    }

    fn finish(
        &mut self,
        masked: Result<MaskedUpload, UserError>,
    ) -> Result<Option<(RoundResult, RoundTranscript)>, LocalError> {
        let masked = match masked {
            Ok(m) => m,
            Err(e) => {
                self.server.abort_pending();
                return Err(e.into());
            }
        };
        let record = SlotRecord {
            slot: masked.secrets.slot,
            quantized: masked.secrets.quantized,
            masked: masked.upload.masked_update.clone(),
            outgoing: masked.secrets.outgoing,
        };
        let result = self.server.on_upload(masked.upload)?;
        self.transcript.slots.push(record);
        Ok(result.map(|r| {
            let cfg = self.server.config();
            let next = RoundTranscript::new(self.server.state().round_id, cfg.buffer_size, cfg.dim, cfg.modulus);
            (r, std::mem::replace(&mut self.transcript, next))
        }))
    }
}
