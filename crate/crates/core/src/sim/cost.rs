use std::hint::black_box;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::field::Modulus;
use crate::prg::{expand, Seed};
use crate::transport::codec::SEALED_HEADER_LEN;
use crate::transport::HEADER_LEN;
use crate::vault::{decrypt, encrypt, keygen, setup_with_rng, Attribute, SEALED_BLOB_LEN};

/// Bytes of one sealed seed on the wire.
pub const SEALED_WIRE_LEN: usize = SEALED_HEADER_LEN + SEALED_BLOB_LEN;
const POINT_LEN: usize = 32;
const TOKEN_LEN: usize = 24;

/// Simulated durations of the protocol's primitive operations, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub prg_per_element_s: f64,
    pub encrypt_s: f64,
    pub decrypt_s: f64,
    pub upload_per_byte_s: f64,
    pub download_per_byte_s: f64,
}

impl Default for CostModel {
    /// Fixed constants in the range measured on a desktop core, with a
    /// 100 Mbit/s link.
    fn default() -> Self {
        Self {
            prg_per_element_s: 5e-9,
            encrypt_s: 1e-4,
            decrypt_s: 6e-5,
            upload_per_byte_s: 8e-8,
            download_per_byte_s: 8e-8,
        }
    }
}

/// Bytes a user downloads in the grant for `slot`.
pub fn grant_bytes(k: u32, slot: u32) -> usize {
    HEADER_LEN + 4 + 4 + 8 + TOKEN_LEN + k as usize * POINT_LEN + 4 + slot as usize * SEALED_WIRE_LEN
}

/// Bytes a user uploads from `slot`.
pub fn upload_bytes(k: u32, slot: u32, dim: usize) -> usize {
    HEADER_LEN + 8 + 4 + 4 * dim + 4 + (k - 1 - slot) as usize * SEALED_WIRE_LEN
}

impl CostModel {
    pub fn zero() -> Self {
        Self {
            prg_per_element_s: 0.0,
            encrypt_s: 0.0,
            decrypt_s: 0.0,
            upload_per_byte_s: 0.0,
            download_per_byte_s: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        let all = [
            self.prg_per_element_s,
            self.encrypt_s,
            self.decrypt_s,
            self.upload_per_byte_s,
            self.download_per_byte_s,
        ];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err("cost model durations must be finite and non-negative")
        }
    }

    /// Protocol time of the user in `slot` of a `k`-slot buffer: `slot`
    /// decryptions, `k - 1 - slot` encryptions, `k - 1` mask expansions and
    /// the grant/upload transfers.
    pub fn slot_cost(&self, k: u32, slot: u32, dim: usize) -> f64 {
        assert!(slot < k, "slot outside the buffer");
        let crypto = slot as f64 * self.decrypt_s + (k - 1 - slot) as f64 * self.encrypt_s;
        let prg = (k - 1) as f64 * dim as f64 * self.prg_per_element_s;
        let wire = grant_bytes(k, slot) as f64 * self.download_per_byte_s
            + upload_bytes(k, slot, dim) as f64 * self.upload_per_byte_s;
        crypto + prg + wire
    }

    /// Time of a plain upload without secure aggregation.
    pub fn plain_upload_cost(&self, dim: usize) -> f64 {
        (HEADER_LEN + 8 + 8 * dim) as f64 * self.upload_per_byte_s
    }

    /// Times the real primitives on this host.
    pub fn calibrate() -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(0x5eed);
        let (pp, mk) = setup_with_rng("calibration", &mut rng);
        let attr = Attribute::new(0, 1);
        let sk = keygen(&pp, &mk, attr);
        let pk = sk.public_key();
        let seed = Seed::random(&mut rng);
        let reps = 200;

        let t = Instant::now();
        let cts: Vec<_> = (0..reps).map(|_| encrypt(&pp, &pk, &seed, 0, &mut rng)).collect();
        let encrypt_s = t.elapsed().as_secs_f64() / reps as f64;

        let t = Instant::now();
        for ct in &cts {
            black_box(decrypt(&pp, ct, &sk).ok());
        }
        let decrypt_s = t.elapsed().as_secs_f64() / reps as f64;

        let dim = 200_000;
        let t = Instant::now();
        black_box(expand(&seed, dim, Modulus::default()));
        let prg_per_element_s = t.elapsed().as_secs_f64() / dim as f64;

        Self {
            prg_per_element_s,
            encrypt_s,
            decrypt_s,
            ..Self::default()
        }
    }
}

/// Mean per-user protocol time over the slots of a `k`-slot buffer. Every
/// user performs `k - 1` sealing operations and `k - 1` expansions whatever
/// its slot. The population size `_users` does not enter: a user only
/// interacts with the members of its own buffer.
pub fn measure_user_protocol_cost(k: u32, dim: usize, _users: usize, cost: &CostModel) -> f64 {
    assert!(k >= 1, "buffer size must be at least 1");
    aggregate_round_cost(k, dim, cost) / k as f64
}

/// Serial protocol time to fill one buffer: the sum of all slot costs.
pub fn aggregate_round_cost(k: u32, dim: usize, cost: &CostModel) -> f64 {
    assert!(k >= 1, "buffer size must be at least 1");
    (0..k).map(|slot| cost.slot_cost(k, slot, dim)).sum()
}
