//! Attribute-gated seed encryption.
//!
//! A seed is sealed to an [`Attribute`] `(round, slot)` without knowing who
//! will occupy that slot. Only the holder of the [`AttributeSecretKey`] for the
//! same attribute, issued by the [`AttributeAuthority`], can open it.
//!
//! The backend derives one X25519 key pair per attribute from the authority's
//! master key. The authority publishes the public halves for a round; sealing
//! is an ephemeral Diffie-Hellman to the attribute public key followed by
//! ChaCha20-Poly1305 under an HKDF-derived key. Every header field of a
//! [`SealedSeed`] is bound as associated data.

mod authority;

pub use authority::{
    AaRejection, AttributeAuthority, GrantToken, KeyRequest, LinkKey, RoundNotice,
};

use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use hkdf::Hkdf;
use rand::CryptoRng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;
use thiserror::Error;
use x25519_dalek::{x25519, PublicKey, StaticSecret};

use crate::prg::{Seed, SEED_LEN};

pub const NONCE_LEN: usize = 12;
const TAG_LEN: usize = 16;
const POINT_LEN: usize = 32;
/// Length of the sealed blob: ephemeral public key, encrypted seed, tag.
pub const SEALED_BLOB_LEN: usize = POINT_LEN + SEED_LEN + TAG_LEN;

/// The access policy of a sealed seed: buffer position `slot` in round
/// `round`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Attribute {
    pub round: u64,
    pub slot: u32,
}

impl Attribute {
    pub const fn new(round: u64, slot: u32) -> Self {
        Self { round, slot }
    }

    fn encode(&self) -> [u8; 12] {
        let mut out = [0u8; 12];
        out[..8].copy_from_slice(&self.round.to_be_bytes());
        out[8..].copy_from_slice(&self.slot.to_be_bytes());
        out
    }
}

/// System-wide public parameters published by the authority.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublicParams {
    pub system_id: [u8; 16],
    pub version: u16,
    pub aa_endpoint: String,
}

impl PublicParams {
    pub const VERSION: u16 = 1;

    fn domain(&self, label: &[u8]) -> Vec<u8> {
        let mut info = Vec::with_capacity(label.len() + 18);
        info.extend_from_slice(label);
        info.extend_from_slice(&self.system_id);
        info.extend_from_slice(&self.version.to_be_bytes());
        info
    }
}

/// Root secret of the authority. Deliberately not serializable.
#[derive(Clone)]
pub struct MasterKey([u8; 32]);

impl MasterKey {
    pub fn from_bytes(bytes: [u8; 32]) -> Self {
        Self(bytes)
    }
}

impl PartialEq for MasterKey {
    fn eq(&self, other: &Self) -> bool {
        self.0 == other.0
    }
}

impl std::fmt::Debug for MasterKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("MasterKey(..)")
    }
}

/// Decryption key bound to exactly one attribute.
#[derive(Clone, PartialEq, Eq)]
pub struct AttributeSecretKey {
    attribute: Attribute,
    secret: [u8; 32],
    /// Matching public point, kept so that opening does not recompute it.
    point: [u8; 32],
}

impl AttributeSecretKey {
    pub fn attribute(&self) -> Attribute {
        self.attribute
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.secret
    }

    /// Rebuilds a key received over the wire.
    pub fn from_parts(attribute: Attribute, secret: [u8; 32]) -> Self {
        Self {
            attribute,
            secret,
            point: base_point_mul(secret),
        }
    }

    pub fn public_key(&self) -> AttributePublicKey {
        AttributePublicKey {
            attribute: self.attribute,
            point: self.point,
        }
    }
}

impl std::fmt::Debug for AttributeSecretKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AttributeSecretKey")
            .field("attribute", &self.attribute)
            .finish_non_exhaustive()
    }
}

/// Published encryption key of one attribute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct AttributePublicKey {
    pub attribute: Attribute,
    pub point: [u8; 32],
}

/// A seed sealed to an attribute, tagged with the slot of its creator.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SealedSeed {
    pub attribute: Attribute,
    pub origin: u32,
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedSeed {
    fn aad(&self) -> Vec<u8> {
        sealed_aad(self.attribute, self.origin, &self.nonce)
    }
}

fn sealed_aad(attribute: Attribute, origin: u32, nonce: &[u8; NONCE_LEN]) -> Vec<u8> {
    let mut aad = Vec::with_capacity(28);
    aad.extend_from_slice(&attribute.encode());
    aad.extend_from_slice(&origin.to_be_bytes());
    aad.extend_from_slice(nonce);
    aad
}

/// Decryption failure. Carries no detail on purpose: a wrong attribute, a
/// foreign authority and a tampered ciphertext look the same.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("access denied")]
pub struct AccessDenied;

/// Creates fresh public parameters and master key from the OS generator.
pub fn setup(aa_endpoint: impl Into<String>) -> (PublicParams, MasterKey) {
    setup_with_rng(aa_endpoint, &mut rand::rng())
}

pub fn setup_with_rng<R: CryptoRng + ?Sized>(
    aa_endpoint: impl Into<String>,
    rng: &mut R,
) -> (PublicParams, MasterKey) {
    let mut system_id = [0u8; 16];
    rng.fill_bytes(&mut system_id);
    let mut mk = [0u8; 32];
    rng.fill_bytes(&mut mk);
    (
        PublicParams {
            system_id,
            version: PublicParams::VERSION,
            aa_endpoint: aa_endpoint.into(),
        },
        MasterKey(mk),
    )
}

/// Derives the secret key of `attr`. Deterministic in `(pp, mk, attr)`.
pub fn keygen(pp: &PublicParams, mk: &MasterKey, attr: Attribute) -> AttributeSecretKey {
    let hk = Hkdf::<Sha256>::new(Some(&pp.domain(b"basa/attribute-key")), &mk.0);
    let mut secret = [0u8; 32];
    hk.expand(&attr.encode(), &mut secret)
        .expect("32 bytes is a valid HKDF output length");
    AttributeSecretKey::from_parts(attr, secret)
}

/// Same as `x25519(secret, basepoint)`, through the precomputed base table.
fn base_point_mul(secret: [u8; 32]) -> [u8; 32] {
    PublicKey::from(&StaticSecret::from(secret)).to_bytes()
}

fn aead_for(pp: &PublicParams, shared: &[u8; 32], eph: &[u8; 32], recipient: &[u8; 32]) -> ChaCha20Poly1305 {
    let mut salt = Vec::with_capacity(64);
    salt.extend_from_slice(eph);
    salt.extend_from_slice(recipient);
    let hk = Hkdf::<Sha256>::new(Some(&salt), shared);
    let mut key = [0u8; 32];
    hk.expand(&pp.domain(b"basa/seal"), &mut key)
        .expect("32 bytes is a valid HKDF output length");
    ChaCha20Poly1305::new_from_slice(&key).expect("key length is 32")
}

/// Seals `seed` so that only the key of `recipient.attribute` opens it.
pub fn encrypt<R: CryptoRng + ?Sized>(
    pp: &PublicParams,
    recipient: &AttributePublicKey,
    seed: &Seed,
    origin: u32,
    rng: &mut R,
) -> SealedSeed {
    Sealer::new(rng).seal(pp, recipient, seed, origin, rng)
}

/// One ephemeral key shared by every seed a sender seals in a round. Each
/// recipient still gets its own Diffie-Hellman secret, AEAD key and nonce.
pub struct Sealer {
    eph_secret: [u8; 32],
    eph_public: [u8; 32],
}

impl Sealer {
    pub fn new<R: CryptoRng + ?Sized>(rng: &mut R) -> Self {
        let mut eph_secret = [0u8; 32];
        rng.fill_bytes(&mut eph_secret);
        Self {
            eph_secret,
            eph_public: base_point_mul(eph_secret),
        }
    }

    pub fn seal<R: CryptoRng + ?Sized>(
        &self,
        pp: &PublicParams,
        recipient: &AttributePublicKey,
        seed: &Seed,
        origin: u32,
        rng: &mut R,
    ) -> SealedSeed {
        let mut nonce = [0u8; NONCE_LEN];
        rng.fill_bytes(&mut nonce);
        let shared = x25519(self.eph_secret, recipient.point);
        let cipher = aead_for(pp, &shared, &self.eph_public, &recipient.point);
        let aad = sealed_aad(recipient.attribute, origin, &nonce);
        let body = cipher
            .encrypt(
                &Nonce::from(nonce),
                Payload {
                    msg: seed.as_bytes(),
                    aad: &aad,
                },
            )
            .expect("in-memory encryption cannot fail");
        let mut ciphertext = Vec::with_capacity(SEALED_BLOB_LEN);
        ciphertext.extend_from_slice(&self.eph_public);
        ciphertext.extend_from_slice(&body);
        SealedSeed {
            attribute: recipient.attribute,
            origin,
            nonce,
            ciphertext,
        }
    }
}

impl std::fmt::Debug for Sealer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Sealer").finish_non_exhaustive()
    }
}

/// Opens `ct` with `sk`, or returns [`AccessDenied`].
pub fn decrypt(
    pp: &PublicParams,
    ct: &SealedSeed,
    sk: &AttributeSecretKey,
) -> Result<Seed, AccessDenied> {
    if ct.attribute != sk.attribute || ct.ciphertext.len() != SEALED_BLOB_LEN {
        return Err(AccessDenied);
    }
    let eph_public: [u8; 32] = ct.ciphertext[..POINT_LEN].try_into().expect("length checked");
    let own_public = sk.point;
    let shared = x25519(sk.secret, eph_public);
    let cipher = aead_for(pp, &shared, &eph_public, &own_public);
    let plain = cipher
        .decrypt(
            &Nonce::from(ct.nonce),
            Payload {
                msg: &ct.ciphertext[POINT_LEN..],
                aad: &ct.aad(),
            },
        )
        .map_err(|_| AccessDenied)?;
    let bytes: [u8; SEED_LEN] = plain.as_slice().try_into().map_err(|_| AccessDenied)?;
    Ok(Seed::from_bytes(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn fixture() -> (PublicParams, MasterKey, ChaCha20Rng) {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let (pp, mk) = setup_with_rng("loopback", &mut rng);
        (pp, mk, rng)
    }

    #[test]
    fn base_table_matches_the_ladder() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..64 {
            let s: [u8; 32] = rng.random();
            assert_eq!(base_point_mul(s), x25519(s, x25519_dalek::X25519_BASEPOINT_BYTES));
        }
    }

    #[test]
    fn setup_is_fresh_and_params_serialize() {
        let (pp1, mk1) = setup("aa:1");
        let (_, mk2) = setup("aa:1");
        assert_ne!(mk1, mk2);
        let json = serde_json::to_string(&pp1).unwrap();
        assert_eq!(serde_json::from_str::<PublicParams>(&json).unwrap(), pp1);
    }

    #[test]
    fn keygen_is_deterministic_and_round_separated() {
        let (pp, mk, _) = fixture();
        let a = Attribute::new(0, 1);
        assert_eq!(keygen(&pp, &mk, a), keygen(&pp, &mk, a));
        assert_ne!(
            keygen(&pp, &mk, a).to_bytes(),
            keygen(&pp, &mk, Attribute::new(1, 1)).to_bytes()
        );
    }

    #[test]
    fn independent_masters_never_collide() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let a = Attribute::new(3, 2);
        for _ in 0..1000 {
            let (pp, mk1) = setup_with_rng("x", &mut rng);
            let mk2 = MasterKey(rng.random());
            assert_ne!(keygen(&pp, &mk1, a).to_bytes(), keygen(&pp, &mk2, a).to_bytes());
        }
    }

    #[test]
    fn round_trip_and_nonce_freshness() {
        let (pp, mk, mut rng) = fixture();
        let a = Attribute::new(4, 2);
        let sk = keygen(&pp, &mk, a);
        let seed = Seed::random(&mut rng);
        let c1 = encrypt(&pp, &sk.public_key(), &seed, 0, &mut rng);
        let c2 = encrypt(&pp, &sk.public_key(), &seed, 0, &mut rng);
        assert_ne!(c1, c2);
        assert_eq!(decrypt(&pp, &c1, &sk), Ok(seed));
        assert_eq!(decrypt(&pp, &c2, &sk), Ok(seed));
    }

    #[test]
    fn shared_ephemeral_keeps_recipients_apart() {
        let (pp, mk, mut rng) = fixture();
        let sealer = Sealer::new(&mut rng);
        let keys: Vec<_> = (1..5).map(|j| keygen(&pp, &mk, Attribute::new(7, j))).collect();
        let seeds: Vec<_> = keys.iter().map(|_| Seed::random(&mut rng)).collect();
        let cts: Vec<_> = keys
            .iter()
            .zip(&seeds)
            .map(|(k, s)| sealer.seal(&pp, &k.public_key(), s, 0, &mut rng))
            .collect();
        assert!(cts.windows(2).all(|w| w[0].ciphertext[..32] == w[1].ciphertext[..32]));
        for (i, ct) in cts.iter().enumerate() {
            for (j, k) in keys.iter().enumerate() {
                assert_eq!(decrypt(&pp, ct, k).is_ok(), i == j);
            }
            assert_eq!(decrypt(&pp, ct, &keys[i]), Ok(seeds[i]));
        }
    }

    #[test]
    fn ciphertext_length_is_constant() {
        let (pp, mk, mut rng) = fixture();
        for (round, slot) in [(0u64, 0u32), (u64::MAX, 9), (77, 1_000_000)] {
            let pk = keygen(&pp, &mk, Attribute::new(round, slot)).public_key();
            let ct = encrypt(&pp, &pk, &Seed::random(&mut rng), 3, &mut rng);
            assert_eq!(ct.ciphertext.len(), SEED_LEN + 48);
        }
    }

    #[test]
    fn mismatched_keys_are_denied() {
        let (pp, mk, mut rng) = fixture();
        let a = Attribute::new(5, 3);
        let ct = encrypt(&pp, &keygen(&pp, &mk, a).public_key(), &Seed::random(&mut rng), 1, &mut rng);
        assert_eq!(decrypt(&pp, &ct, &keygen(&pp, &mk, Attribute::new(5, 2))), Err(AccessDenied));
        assert_eq!(decrypt(&pp, &ct, &keygen(&pp, &mk, Attribute::new(4, 3))), Err(AccessDenied));
        let (_, other_mk) = setup_with_rng("other", &mut rng);
        assert_eq!(decrypt(&pp, &ct, &keygen(&pp, &other_mk, a)), Err(AccessDenied));
        // A key relabelled with the right attribute still fails.
        let forged = AttributeSecretKey::from_parts(a, keygen(&pp, &mk, Attribute::new(5, 2)).to_bytes());
        assert_eq!(decrypt(&pp, &ct, &forged), Err(AccessDenied));
    }

    #[test]
    fn tampering_any_field_is_detected() {
        let (pp, mk, mut rng) = fixture();
        let a = Attribute::new(8, 4);
        let sk = keygen(&pp, &mk, a);
        let ct = encrypt(&pp, &sk.public_key(), &Seed::random(&mut rng), 2, &mut rng);
        let mut t = ct.clone();
        t.origin = 1;
        assert_eq!(decrypt(&pp, &t, &sk), Err(AccessDenied));
        let mut t = ct.clone();
        t.nonce[0] ^= 1;
        assert_eq!(decrypt(&pp, &t, &sk), Err(AccessDenied));
        for i in [0, 31, 32, SEALED_BLOB_LEN - 1] {
            let mut t = ct.clone();
            t.ciphertext[i] ^= 0x80;
            assert_eq!(decrypt(&pp, &t, &sk), Err(AccessDenied), "byte {i}");
        }
        let mut t = ct.clone();
        t.ciphertext.pop();
        assert_eq!(decrypt(&pp, &t, &sk), Err(AccessDenied));
        // Different system parameters derive different keys.
        let mut pp2 = pp.clone();
        pp2.system_id[0] ^= 1;
        assert_eq!(decrypt(&pp2, &ct, &sk), Err(AccessDenied));
    }
}
