use crate::field::FieldVector;
use crate::time::Micros;
use crate::vault::{AttributePublicKey, GrantToken, SealedSeed};

/// Everything a user receives on admission: the round's attribute set, its
/// slot, the seeds sealed to that slot and a grant token for the authority.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotGrant {
    pub round_id: u64,
    pub slot: u32,
    pub attributes: Vec<AttributePublicKey>,
    pub incoming: Vec<SealedSeed>,
    pub token: GrantToken,
    pub deadline: Micros,
}

impl SlotGrant {
    pub fn buffer_size(&self) -> u32 {
        self.attributes.len() as u32
    }
}

/// A user's single upload: masked quantized update, its staleness weight in
/// the clear, and one sealed seed per later slot.
#[derive(Debug, Clone, PartialEq)]
pub struct UploadMsg {
    pub masked_update: FieldVector,
    pub staleness: f64,
    pub outgoing: Vec<SealedSeed>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResult {
    pub aggregate: FieldVector,
    pub staleness_total: f64,
    pub round_id: u64,
    pub contributors: u32,
}
