//! Vectors over a prime field `Z_q` and the stochastic quantizer that maps
//! real-valued model updates into them.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Real;

/// `2^31 - 1`, the default field size.
pub const MERSENNE_31: u32 = (1 << 31) - 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FieldError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("modulus mismatch: {left} vs {right}")]
    ModulusMismatch { left: u32, right: u32 },
    #[error("element {value} out of range for modulus {modulus}")]
    ElementOutOfRange { value: u32, modulus: u32 },
    #[error("modulus {0} is not a prime below 2^31")]
    InvalidModulus(u32),
    #[error("divisor must be positive and finite")]
    InvalidDivisor,
    #[error("invalid quantizer configuration: {0}")]
    InvalidQuantizer(&'static str),
}

/// A prime modulus `q < 2^31`, so that field elements fit in 4 bytes and the
/// sum of two elements never overflows a `u32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct Modulus(u32);

impl Modulus {
    pub fn new(q: u32) -> Result<Self, FieldError> {
        if q <= MERSENNE_31 && is_prime(q) {
            Ok(Self(q))
        } else {
            Err(FieldError::InvalidModulus(q))
        }
    }

    pub const fn mersenne31() -> Self {
        Self(MERSENNE_31)
    }

    #[inline]
    pub const fn get(self) -> u32 {
        self.0
    }

    #[inline]
    pub fn add(self, a: u32, b: u32) -> u32 {
        let s = a + b;
        if s >= self.0 {
            s - self.0
        } else {
            s
        }
    }

    #[inline]
    pub fn sub(self, a: u32, b: u32) -> u32 {
        if a >= b {
            a - b
        } else {
            a + (self.0 - b)
        }
    }

    #[inline]
    pub fn mul(self, a: u32, b: u32) -> u32 {
        ((a as u64 * b as u64) % self.0 as u64) as u32
    }

    /// Embeds a signed integer as its residue.
    pub fn embed(self, z: i64) -> u32 {
        z.rem_euclid(self.0 as i64) as u32
    }

    /// Symmetric representative: `e` if `e < q/2`, else `e - q`.
    pub fn signed(self, e: u32) -> i64 {
        if (e as u64) * 2 < self.0 as u64 {
            e as i64
        } else {
            e as i64 - self.0 as i64
        }
    }
}

impl Default for Modulus {
    fn default() -> Self {
        Self::mersenne31()
    }
}

impl TryFrom<u32> for Modulus {
    type Error = FieldError;

    fn try_from(q: u32) -> Result<Self, Self::Error> {
        Self::new(q)
    }
}

impl From<Modulus> for u32 {
    fn from(m: Modulus) -> u32 {
        m.0
    }
}

fn is_prime(n: u32) -> bool {
    if n < 2 {
        return false;
    }
    if n.is_multiple_of(2) {
        return n == 2;
    }
    let n = n as u64;
    let mut d = 3u64;
    while d * d <= n {
        if n.is_multiple_of(d) {
            return false;
        }
        d += 2;
    }
    true
}

/// A length-`d` vector over `Z_q`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct FieldVector {
    elems: Vec<u32>,
    modulus: Modulus,
}

impl FieldVector {
    pub fn zeros(dim: usize, modulus: Modulus) -> Self {
        Self {
            elems: vec![0; dim],
            modulus,
        }
    }

    pub fn from_elems(elems: Vec<u32>, modulus: Modulus) -> Result<Self, FieldError> {
        if let Some(&value) = elems.iter().find(|&&e| e >= modulus.get()) {
            return Err(FieldError::ElementOutOfRange {
                value,
                modulus: modulus.get(),
            });
        }
        Ok(Self { elems, modulus })
    }

    pub fn dim(&self) -> usize {
        self.elems.len()
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn elems(&self) -> &[u32] {
        &self.elems
    }

    pub fn into_elems(self) -> Vec<u32> {
        self.elems
    }

    pub fn is_zero(&self) -> bool {
        self.elems.iter().all(|&e| e == 0)
    }

    fn check(&self, other: &Self) -> Result<(), FieldError> {
        if self.modulus != other.modulus {
            return Err(FieldError::ModulusMismatch {
                left: self.modulus.get(),
                right: other.modulus.get(),
            });
        }
        if self.dim() != other.dim() {
            return Err(FieldError::DimensionMismatch {
                left: self.dim(),
                right: other.dim(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self, FieldError> {
        let mut out = self.clone();
        out.add_assign(other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, FieldError> {
        let mut out = self.clone();
        out.sub_assign(other)?;
        Ok(out)
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<(), FieldError> {
        self.check(other)?;
        let q = self.modulus;
        for (a, &b) in self.elems.iter_mut().zip(&other.elems) {
            *a = q.add(*a, b);
        }
        Ok(())
    }

    pub fn sub_assign(&mut self, other: &Self) -> Result<(), FieldError> {
        self.check(other)?;
        let q = self.modulus;
        for (a, &b) in self.elems.iter_mut().zip(&other.elems) {
            *a = q.sub(*a, b);
        }
        Ok(())
    }

    pub fn scalar_mul(&self, c: u32) -> Self {
        let q = self.modulus;
        let c = c % q.get();
        Self {
            elems: self.elems.iter().map(|&e| q.mul(e, c)).collect(),
            modulus: q,
        }
    }

    pub(crate) fn elems_mut(&mut self) -> &mut [u32] {
        &mut self.elems
    }
}

/// Sums a non-empty sequence of vectors; `None` for an empty iterator.
pub fn sum<'a, I>(vectors: I) -> Result<Option<FieldVector>, FieldError>
where
    I: IntoIterator<Item = &'a FieldVector>,
{
    let mut iter = vectors.into_iter();
    let Some(first) = iter.next() else {
        return Ok(None);
    };
    let mut acc = first.clone();
    for v in iter {
        acc.add_assign(v)?;
    }
    Ok(Some(acc))
}

/// Parameters of the real-to-field quantizer.
///
/// Coordinates are clipped to `[-clip, clip]` and multiplied by `scale`
/// before rounding, so `scale * clip` must stay below `(q - 1) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantizerConfig<T> {
    modulus: Modulus,
    scale: T,
    clip: T,
}

impl<T: Real> QuantizerConfig<T> {
    pub const DEFAULT_SCALE: f64 = 65536.0;
    pub const DEFAULT_CLIP: f64 = 100.0;

    pub fn new(modulus: Modulus, scale: T, clip: T) -> Result<Self, FieldError> {
        if !(scale.is_finite() && scale > T::zero()) {
            return Err(FieldError::InvalidQuantizer("scale must be positive"));
        }
        if !(clip.is_finite() && clip > T::zero()) {
            return Err(FieldError::InvalidQuantizer("clip must be positive"));
        }
        let half = (modulus.get() as f64 - 1.0) / 2.0;
        if (scale * clip).as_f64() >= half {
            return Err(FieldError::InvalidQuantizer(
                "scale * clip must be below (q - 1) / 2",
            ));
        }
        Ok(Self {
            modulus,
            scale,
            clip,
        })
    }

    pub fn modulus(&self) -> Modulus {
        self.modulus
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn clip(&self) -> T {
        self.clip
    }

    /// Number of full-range quantized vectors that can be summed before the
    /// signed embedding wraps around.
    pub fn max_summands(&self) -> u64 {
        let half = (self.modulus.get() as f64 - 1.0) / 2.0;
        let bound = (self.scale * self.clip).as_f64().ceil() + 1.0;
        (half / bound).floor() as u64
    }
}

impl<T: Real> Default for QuantizerConfig<T> {
    fn default() -> Self {
        Self::new(
            Modulus::mersenne31(),
            T::of(Self::DEFAULT_SCALE),
            T::of(Self::DEFAULT_CLIP),
        )
        .expect("default quantizer is valid")
    }
}

/// Stochastically rounds `x` onto the integer grid of step `1/scale` and
/// embeds it in `Z_q`. Rounds up with probability equal to the fractional
/// part, so the expectation of the dequantized value is the clipped input.
/// NaN coordinates are treated as zero.
pub fn quantize<T: Real, R: Rng + ?Sized>(
    x: &[T],
    cfg: &QuantizerConfig<T>,
    rng: &mut R,
) -> FieldVector {
    let q = cfg.modulus;
    let elems = x
        .iter()
        .map(|&v| {
            let v = if v.is_nan() { T::zero() } else { v };
            let scaled = v.max(-cfg.clip).min(cfg.clip) * cfg.scale;
            let lo = scaled.floor();
            let frac = scaled - lo;
            let u = T::of(rng.random::<f64>());
            let z = if u < frac { lo + T::one() } else { lo };
            q.embed(z.to_i64().expect("clipped value fits in i64"))
        })
        .collect();
    FieldVector { elems, modulus: q }
}

/// Maps each element to its signed representative and divides by
/// `scale * divisor`.
pub fn dequantize<T: Real>(
    v: &FieldVector,
    cfg: &QuantizerConfig<T>,
    divisor: T,
) -> Result<Vec<T>, FieldError> {
    if v.modulus != cfg.modulus {
        return Err(FieldError::ModulusMismatch {
            left: v.modulus.get(),
            right: cfg.modulus.get(),
        });
    }
    if !(divisor.is_finite() && divisor > T::zero()) {
        return Err(FieldError::InvalidDivisor);
    }
    let denom = cfg.scale * divisor;
    Ok(v
        .elems
        .iter()
        .map(|&e| T::of(v.modulus.signed(e) as f64) / denom)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn q97() -> Modulus {
        Modulus::new(97).unwrap()
    }

    fn fv(e: &[u32]) -> FieldVector {
        FieldVector::from_elems(e.to_vec(), q97()).unwrap()
    }

    #[test]
    fn add_examples() {
        assert_eq!(fv(&[5]).add(&fv(&[95])).unwrap(), fv(&[3]));
        assert_eq!(fv(&[0, 0]).add(&fv(&[17, 42])).unwrap(), fv(&[17, 42]));
        assert_eq!(fv(&[40, 60]).add(&fv(&[60, 50])).unwrap(), fv(&[3, 13]));
    }

    #[test]
    fn sub_examples() {
        assert_eq!(fv(&[3]).sub(&fv(&[95])).unwrap(), fv(&[5]));
        let a = fv(&[12, 96, 0]);
        assert!(a.sub(&a).unwrap().is_zero());
        assert_eq!(fv(&[3, 13]).sub(&fv(&[60, 50])).unwrap(), fv(&[40, 60]));
    }

    #[test]
    fn structural_errors() {
        assert_eq!(
            fv(&[1]).add(&fv(&[1, 2])),
            Err(FieldError::DimensionMismatch { left: 1, right: 2 })
        );
        let other = FieldVector::zeros(1, Modulus::new(101).unwrap());
        assert!(matches!(
            fv(&[1]).sub(&other),
            Err(FieldError::ModulusMismatch { .. })
        ));
        assert!(FieldVector::from_elems(vec![97], q97()).is_err());
        assert!(Modulus::new(91).is_err());
        assert!(Modulus::new(u32::MAX).is_err());
        assert_eq!(Modulus::new(MERSENNE_31).unwrap(), Modulus::mersenne31());
    }

    #[test]
    fn scalar_mul_wraps() {
        assert_eq!(fv(&[50, 1]).scalar_mul(2), fv(&[3, 2]));
    }

    #[test]
    fn quantizer_config_validation() {
        let q = Modulus::mersenne31();
        assert!(QuantizerConfig::<f64>::new(q, 0.0, 1.0).is_err());
        assert!(QuantizerConfig::<f64>::new(q, 1.0, -1.0).is_err());
        assert!(QuantizerConfig::<f64>::new(q97(), 10.0, 5.0).is_err());
        assert!(QuantizerConfig::<f64>::new(q97(), 10.0, 4.7).is_ok());
        let d = QuantizerConfig::<f64>::default();
        assert_eq!(d.scale(), 65536.0);
        assert_eq!(d.clip(), 100.0);
        assert!(d.max_summands() >= 160);
    }

    #[test]
    fn quantize_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Modulus::mersenne31();
        let cfg = QuantizerConfig::new(q, 100.0, 100.0).unwrap();
        assert_eq!(quantize(&[0.0f64], &cfg, &mut rng).elems(), &[0]);
        for _ in 0..100 {
            assert_eq!(quantize(&[2.0f64], &cfg, &mut rng).elems(), &[200]);
        }
        // -2.0 embeds as q - 200.
        assert_eq!(quantize(&[-2.0f64], &cfg, &mut rng).elems(), &[q.get() - 200]);
        // Out-of-range and NaN inputs are absorbed.
        let v = quantize(&[1e9f64, -1e9, f64::NAN], &cfg, &mut rng);
        assert_eq!(v.elems(), &[10_000, q.get() - 10_000, 0]);
    }

    #[test]
    fn stochastic_rounding_law() {
        // 0.015 * 100 = 1.5: half the draws land on each neighbour.
        let cfg = QuantizerConfig::new(Modulus::mersenne31(), 100.0, 100.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 10_000;
        let mut ones = 0;
        let mut total = 0.0;
        for _ in 0..n {
            let v = quantize(&[0.015f64], &cfg, &mut rng);
            match v.elems()[0] {
                1 => ones += 1,
                2 => {}
                other => panic!("unexpected grid point {other}"),
            }
            total += dequantize(&v, &cfg, 1.0).unwrap()[0];
        }
        let p = ones as f64 / n as f64;
        assert!((p - 0.5).abs() < 3.0 * (0.25f64 / n as f64).sqrt(), "p = {p}");
        // The true rounding standard deviation here is 0.5 / scale.
        let sigma = 0.5 / 100.0 / (n as f64).sqrt();
        assert!((total / n as f64 - 0.015).abs() <= 3.0 * sigma);
    }

    #[test]
    fn dequantize_examples() {
        let q = Modulus::mersenne31();
        let cfg = QuantizerConfig::new(q, 100.0, 100.0).unwrap();
        let zero = FieldVector::zeros(1, q);
        assert_eq!(dequantize(&zero, &cfg, 3.5).unwrap(), vec![0.0]);
        let v = FieldVector::from_elems(vec![q.get() - 200], q).unwrap();
        assert_eq!(dequantize(&v, &cfg, 1.0).unwrap(), vec![-2.0]);
        assert_eq!(dequantize(&v, &cfg, 0.0), Err(FieldError::InvalidDivisor));
        assert_eq!(dequantize(&v, &cfg, -1.0), Err(FieldError::InvalidDivisor));
        let bad = FieldVector::zeros(1, q97());
        assert!(dequantize(&bad, &cfg, 1.0).is_err());
    }

    #[test]
    fn works_in_single_precision() {
        let cfg = QuantizerConfig::<f32>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = [0.25f32, -1.5, 3.0];
        let back = dequantize(&quantize(&x, &cfg, &mut rng), &cfg, 1.0).unwrap();
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() <= 1.0 / cfg.scale());
        }
    }

    fn arb_vec(dim: usize) -> impl Strategy<Value = FieldVector> {
        prop::collection::vec(0u32..97, dim).prop_map(|e| FieldVector::from_elems(e, Modulus::new(97).unwrap()).unwrap())
    }

    proptest! {
        #[test]
        fn add_is_associative_and_commutative(
            (a, b, c) in (1usize..16).prop_flat_map(|d| (arb_vec(d), arb_vec(d), arb_vec(d)))
        ) {
            prop_assert_eq!(a.add(&b).unwrap(), b.add(&a).unwrap());
            prop_assert_eq!(a.add(&b).unwrap().add(&c).unwrap(), a.add(&b.add(&c).unwrap()).unwrap());
            prop_assert_eq!(a.add(&b).unwrap().sub(&b).unwrap(), a);
        }

        #[test]
        fn sum_is_permutation_invariant(
            (vs, perm_seed) in (1usize..8).prop_flat_map(|d| (prop::collection::vec(arb_vec(d), 1..12), any::<u64>()))
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = vs.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            prop_assert_eq!(sum(&vs).unwrap(), sum(&shuffled).unwrap());
        }

        #[test]
        fn round_trip_within_one_grid_step(
            x in prop::collection::vec(-150.0f64..150.0, 1..32),
            seed in any::<u64>(),
        ) {
            let cfg = QuantizerConfig::<f64>::default();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let back = dequantize(&quantize(&x, &cfg, &mut rng), &cfg, 1.0).unwrap();
            for (orig, got) in x.iter().zip(&back) {
                let clipped = orig.clamp(-cfg.clip(), cfg.clip());
                prop_assert!((clipped - got).abs() <= 1.0 / cfg.scale());
            }
        }
    }
}
