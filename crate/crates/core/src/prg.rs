//! Seed expansion: turns a 32-byte seed into a pseudorandom mask over `Z_q`.
//!
//! The stream is ChaCha20 keyed by the seed; field elements are drawn from
//! 32-bit words by rejection sampling, so every element is uniform in
//! `[0, q)` and a shorter expansion is always a prefix of a longer one.

use std::fmt;

use rand::{CryptoRng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::field::{FieldVector, Modulus};

pub const SEED_LEN: usize = 32;

/// Opaque mask seed.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed([u8; SEED_LEN]);

impl Seed {
    pub const fn from_bytes(bytes: [u8; SEED_LEN]) -> Self {
        Self(bytes)
    }

    pub fn random<R: CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; SEED_LEN];
        rng.fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; SEED_LEN] {
        &self.0
    }
}

impl fmt::Debug for Seed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Seed(..)")
    }
}

struct MaskStream {
    rng: ChaCha20Rng,
    modulus: u32,
    /// `floor((2^64 - 1) / q) + 1`, for division-free reduction.
    magic: u64,
    limit: u64,
}

impl MaskStream {
    fn new(seed: &Seed, modulus: Modulus) -> Self {
        let q = modulus.get() as u64;
        Self {
            rng: ChaCha20Rng::from_seed(seed.0),
            modulus: modulus.get(),
            magic: u64::MAX / q + 1,
            limit: ((1u64 << 32) / q) * q,
        }
    }

    /// `w % q` by multiplication (Lemire, Kaser and Kurz); exact for all
    /// 32-bit `w` and `q`.
    #[inline]
    fn reduce(&self, w: u32) -> u32 {
        let low = self.magic.wrapping_mul(w as u64);
        ((low as u128 * self.modulus as u128) >> 64) as u32
    }

    #[inline]
    fn next(&mut self) -> u32 {
        loop {
            let w = self.rng.next_u32();
            if (w as u64) < self.limit {
                return self.reduce(w);
            }
        }
    }
}

/// Expands `seed` into a length-`dim` vector over `Z_q`.
pub fn expand(seed: &Seed, dim: usize, modulus: Modulus) -> FieldVector {
    let mut stream = MaskStream::new(seed, modulus);
    let elems = (0..dim).map(|_| stream.next()).collect();
    FieldVector::from_elems(elems, modulus).expect("rejection sampling stays below q")
}

/// Adds `expand(seed, target.dim(), q)` into `target` without materializing
/// the mask.
pub fn add_mask(target: &mut FieldVector, seed: &Seed) {
    let q = target.modulus();
    let mut stream = MaskStream::new(seed, q);
    for e in target.elems_mut() {
        *e = q.add(*e, stream.next());
    }
}

/// Subtracts `expand(seed, target.dim(), q)` from `target`.
pub fn sub_mask(target: &mut FieldVector, seed: &Seed) {
    let q = target.modulus();
    let mut stream = MaskStream::new(seed, q);
    for e in target.elems_mut() {
        *e = q.sub(*e, stream.next());
    }
}
