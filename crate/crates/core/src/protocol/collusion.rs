//! Executable model of what an honest-but-curious server learns when it
//! pools its view with a set of colluding users.

use std::collections::BTreeSet;

use crate::field::{FieldVector, Modulus};
use crate::prg::{add_mask, sub_mask, Seed};

/// One committed slot as seen by an omniscient observer.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub slot: u32,
    /// The user's quantized input `x_i`.
    pub quantized: FieldVector,
    /// The masked upload `y_i`.
    pub masked: FieldVector,
    /// `(j, s_ij)` for every later slot `j`.
    pub outgoing: Vec<(u32, Seed)>,
}

/// Committed slots of one round, in slot order.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundTranscript {
    pub round_id: u64,
    pub buffer_size: u32,
    pub dim: usize,
    pub modulus: Modulus,
    pub slots: Vec<SlotRecord>,
}

impl RoundTranscript {
    pub fn new(round_id: u64, buffer_size: u32, dim: usize, modulus: Modulus) -> Self {
        Self {
            round_id,
            buffer_size,
            dim,
            modulus,
            slots: Vec::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.slots.len() == self.buffer_size as usize
    }
}

/// Server view of the first `prefix` committed slots with everything the
/// colluders know removed: their own inputs and every pairwise mask they
/// share with any slot.
pub fn collusion_view(transcript: &RoundTranscript, colluders: &BTreeSet<u32>, prefix: usize) -> FieldVector {
    let prefix = prefix.min(transcript.slots.len());
    let mut residual = FieldVector::zeros(transcript.dim, transcript.modulus);
    for rec in &transcript.slots[..prefix] {
        residual.add_assign(&rec.masked).expect("transcript vectors share one shape");
        if colluders.contains(&rec.slot) {
            residual.sub_assign(&rec.quantized).expect("transcript vectors share one shape");
        }
    }
    // s_ij exists only once slot i has committed; it contributes +PRG to y_i
    // and -PRG to y_j when j is inside the prefix.
    for rec in &transcript.slots[..prefix] {
        let i = rec.slot;
        for &(j, ref seed) in &rec.outgoing {
            if !(colluders.contains(&i) || colluders.contains(&j)) {
                continue;
            }
            sub_mask(&mut residual, seed);
            if (j as usize) < prefix {
                add_mask(&mut residual, seed);
            }
        }
    }
    residual
}

/// Sum of the honest quantized inputs among the first `prefix` slots.
pub fn honest_prefix_sum(transcript: &RoundTranscript, colluders: &BTreeSet<u32>, prefix: usize) -> FieldVector {
    let prefix = prefix.min(transcript.slots.len());
    let mut sum = FieldVector::zeros(transcript.dim, transcript.modulus);
    for rec in transcript.slots[..prefix].iter().filter(|r| !colluders.contains(&r.slot)) {
        sum.add_assign(&rec.quantized).expect("transcript vectors share one shape");
    }
    sum
}
