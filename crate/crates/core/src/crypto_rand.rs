//! Deterministic randomness.
//!
//! Every random decision made by the owner is a pure function of the secret
//! key and public identifiers, so the owner can replay insertion during
//! extraction. Attack simulations and Laplace noise use explicit `u64` seeds.

use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use md5::{Digest, Md5};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use sha2::Sha256;

use crate::error::{Error, Result};

type HmacSha256 = Hmac<Sha256>;

/// Longest fingerprint a single digest can supply.
pub const MAX_FINGERPRINT_LEN: usize = 128;

/// Owner's secret key. Deliberately not serializable; `Debug` is redacted.
#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(Vec<u8>);

impl SecretKey {
    pub const MIN_LEN: usize = 16;

    pub fn new(bytes: impl Into<Vec<u8>>) -> Result<Self> {
        let bytes = bytes.into();
        if bytes.len() < Self::MIN_LEN {
            return Err(Error::Parameter(format!(
                "secret key must be at least {} bytes, got {}",
                Self::MIN_LEN,
                bytes.len()
            )));
        }
        Ok(Self(bytes))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(<{} bytes redacted>)", self.0.len())
    }
}

fn push_lp(buf: &mut Vec<u8>, bytes: &[u8]) {
    buf.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    buf.extend_from_slice(bytes);
}

/// Length-prefixed concatenation of byte strings.
pub fn length_prefixed<'a>(parts: impl IntoIterator<Item = &'a [u8]>) -> Vec<u8> {
    let mut buf = Vec::new();
    for p in parts {
        push_lp(&mut buf, p);
    }
    buf
}

/// Seed of one fingerprintable position: primary key, attribute `t`, bit `k`.
///
/// `t` and `k` are 1-based. The key itself enters through the keyed digest.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Seed<'a> {
    pub primary_key: &'a str,
    pub attribute: u32,
    pub bit: u32,
}

impl<'a> Seed<'a> {
    pub fn new(primary_key: &'a str, attribute: u32, bit: u32) -> Self {
        Self {
            primary_key,
            attribute,
            bit,
        }
    }

    pub fn serialize(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.primary_key.len() + 20);
        self.serialize_into(&mut buf);
        buf
    }

    fn serialize_into(&self, buf: &mut Vec<u8>) {
        push_lp(buf, self.primary_key.as_bytes());
        push_lp(buf, &self.attribute.to_be_bytes());
        push_lp(buf, &self.bit.to_be_bytes());
    }
}

/// Keyed pseudorandom sequence generator `U`.
///
/// `U_j(s)` is the first eight bytes, big-endian, of HMAC-SHA256 over the
/// serialized seed followed by the single byte `j`.
#[derive(Clone)]
pub struct Prs {
    mac: HmacSha256,
}

impl Prs {
    pub fn new(key: &SecretKey) -> Self {
        let mac = <HmacSha256 as KeyInit>::new_from_slice(key.as_bytes())
            .expect("hmac accepts keys of any length");
        Self { mac }
    }

    pub fn value(&self, seed: &Seed<'_>, j: u8) -> u64 {
        let mut buf = Vec::with_capacity(seed.primary_key.len() + 24);
        seed.serialize_into(&mut buf);
        buf.push(j);
        let mut mac = self.mac.clone();
        mac.update(&buf);
        let out = mac.finalize().into_bytes();
        u64::from_be_bytes(out[..8].try_into().unwrap())
    }

    /// `(U_1, U_2, U_3)` for one seed.
    pub fn triple(&self, seed: &Seed<'_>) -> [u64; 3] {
        let mut buf = Vec::with_capacity(seed.primary_key.len() + 24);
        seed.serialize_into(&mut buf);
        let base = buf.len();
        let mut out = [0u64; 3];
        for (j, slot) in out.iter_mut().enumerate() {
            buf.truncate(base);
            buf.push(j as u8 + 1);
            let mut mac = self.mac.clone();
            mac.update(&buf);
            let d = mac.finalize().into_bytes();
            *slot = u64::from_be_bytes(d[..8].try_into().unwrap());
        }
        out
    }
}

/// One-shot `U_j(s)`.
pub fn prs_value(key: &SecretKey, seed: &Seed<'_>, j: u8) -> u64 {
    Prs::new(key).value(seed, j)
}

/// An `L`-bit fingerprint string.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FingerprintBits(Vec<u8>);

impl FingerprintBits {
    pub fn from_bits(bits: Vec<u8>) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Parameter("fingerprint must have at least one bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Parameter("fingerprint bits must be 0 or 1".into()));
        }
        Ok(Self(bits))
    }

    /// Parses a string of `0` and `1` characters.
    pub fn parse(text: &str) -> Result<Self> {
        let bits = text
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                other => Err(Error::Parameter(format!("invalid fingerprint character '{other}'"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Self::from_bits(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn bit(&self, l: usize) -> u8 {
        self.0[l]
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn hamming(&self, other: &Self) -> usize {
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }
}

impl fmt::Display for FingerprintBits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for &b in &self.0 {
            f.write_str(if b == 1 { "1" } else { "0" })?;
        }
        Ok(())
    }
}

/// `f = MD5(key | internal id)`, most significant bit first, truncated to `len`.
pub fn gen_fingerprint(key: &SecretKey, internal_id: &[u8], len: usize) -> Result<FingerprintBits> {
    if len == 0 || len > MAX_FINGERPRINT_LEN {
        return Err(Error::Parameter(format!(
            "fingerprint length must be in 1..={MAX_FINGERPRINT_LEN}, got {len}"
        )));
    }
    let mut h = Md5::new();
    h.update(length_prefixed([key.as_bytes(), internal_id]));
    let digest = h.finalize();
    let bits = (0..len)
        .map(|i| (digest[i / 8] >> (7 - i % 8)) & 1)
        .collect();
    Ok(FingerprintBits(bits))
}

/// `ID_internal = SHA-256(key | c | i)`, hex-encoded; `c` and `i` are 1-based.
pub fn internal_id(key: &SecretKey, c: u64, i: u64) -> Result<String> {
    if c == 0 || i == 0 {
        return Err(Error::Parameter(
            "sequence number and trial index are 1-based".into(),
        ));
    }
    let mut h = Sha256::new();
    h.update(length_prefixed([
        key.as_bytes(),
        &c.to_be_bytes()[..],
        &i.to_be_bytes()[..],
    ]));
    Ok(hex::encode(h.finalize()))
}

/// Laplace(0, b) draws by inverse CDF on a seeded ChaCha stream.
#[derive(Debug, Clone)]
pub struct LaplaceSampler {
    scale: f64,
    rng_seed: u64,
    rng: ChaCha20Rng,
}

impl LaplaceSampler {
    pub fn new(scale: f64, rng_seed: u64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Parameter(format!("Laplace scale must be positive, got {scale}")));
        }
        Ok(Self {
            scale,
            rng_seed,
            rng: ChaCha20Rng::seed_from_u64(rng_seed),
        })
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn sample(&mut self) -> f64 {
        let u = loop {
            let u: f64 = self.rng.gen();
            if u > 0.0 {
                break u;
            }
        };
        laplace_inverse_cdf(u, self.scale)
    }

    pub fn draws(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.sample()).collect()
    }
}

/// Quantile function of Laplace(0, b) at `u` in (0, 1).
pub fn laplace_inverse_cdf(u: f64, scale: f64) -> f64 {
    if u < 0.5 {
        scale * (2.0 * u).ln()
    } else {
        -scale * (2.0 * (1.0 - u)).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn key() -> SecretKey {
        SecretKey::new(b"unit-test-key-0123456789".to_vec()).unwrap()
    }

    #[test]
    fn short_key_rejected_and_debug_redacted() {
        assert!(SecretKey::new(b"short".to_vec()).is_err());
        let dbg = format!("{:?}", key());
        assert!(!dbg.contains("unit-test"));
    }

    #[test]
    fn prs_is_deterministic() {
        let k = key();
        let s = Seed::new("row-7", 3, 1);
        assert_eq!(prs_value(&k, &s, 1), prs_value(&k, &s, 1));
        let prs = Prs::new(&k);
        assert_eq!(prs.triple(&s), [prs.value(&s, 1), prs.value(&s, 2), prs.value(&s, 3)]);
    }

    #[test]
    fn prs_streams_differ() {
        let prs = Prs::new(&key());
        for i in 0..10_000 {
            let pk = i.to_string();
            let [u1, u2, _] = prs.triple(&Seed::new(&pk, 1, 1));
            assert_ne!(u1, u2);
        }
    }

    #[test]
    fn prs_parity_is_balanced() {
        let prs = Prs::new(&key());
        let n = 100_000;
        let even = (0..n)
            .filter(|i| {
                let pk = i.to_string();
                prs.value(&Seed::new(&pk, 2, 1), 2) % 2 == 0
            })
            .count();
        let frac = even as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    #[test]
    fn seed_serialization_is_unambiguous() {
        let a = Seed::new("ab", 1, 2).serialize();
        let b = Seed::new("a", 1, 2).serialize();
        assert_ne!(a, b);
        assert_ne!(Seed::new("x", 1, 23).serialize(), Seed::new("x", 12, 3).serialize());
    }

    #[test]
    fn fingerprint_is_deterministic_and_128_bits() {
        let k = key();
        let f = gen_fingerprint(&k, b"id-1", 128).unwrap();
        assert_eq!(f.len(), 128);
        assert_eq!(f, gen_fingerprint(&k, b"id-1", 128).unwrap());
        assert!(gen_fingerprint(&k, b"id-1", 129).is_err());
        assert!(gen_fingerprint(&k, b"id-1", 0).is_err());
    }

    #[test]
    fn fingerprint_matches_independent_md5_framing() {
        // Recompute the digest input by hand and compare bit by bit.
        let k = key();
        let id = b"abc";
        let mut input = Vec::new();
        input.extend_from_slice(&(k.as_bytes().len() as u32).to_be_bytes());
        input.extend_from_slice(k.as_bytes());
        input.extend_from_slice(&3u32.to_be_bytes());
        input.extend_from_slice(id);
        let d = Md5::digest(&input);
        let f = gen_fingerprint(&k, id, 128).unwrap();
        for (byte_idx, byte) in d.iter().enumerate() {
            for b in 0..8 {
                assert_eq!(f.bit(byte_idx * 8 + b), (byte >> (7 - b)) & 1);
            }
        }
        assert_eq!(gen_fingerprint(&k, id, 40).unwrap().bits(), &f.bits()[..40]);
    }

    #[test]
    fn fingerprint_avalanche() {
        let k = key();
        let trials = 1000;
        let total: usize = (0..trials)
            .map(|i| {
                let a = gen_fingerprint(&k, format!("id-{i}").as_bytes(), 128).unwrap();
                let b = gen_fingerprint(&k, format!("id-{i}x").as_bytes(), 128).unwrap();
                a.hamming(&b)
            })
            .sum();
        let mean = total as f64 / trials as f64;
        assert!((mean - 64.0).abs() < 15.0, "{mean}");
    }

    #[test]
    fn internal_ids() {
        let k = key();
        assert_eq!(internal_id(&k, 1, 1).unwrap(), internal_id(&k, 1, 1).unwrap());
        assert_ne!(internal_id(&k, 2, 1).unwrap(), internal_id(&k, 1, 2).unwrap());
        assert!(internal_id(&k, 0, 1).is_err());
        let mut seen = HashSet::new();
        for c in 1..=100 {
            for i in 1..=100 {
                assert!(seen.insert(internal_id(&k, c, i).unwrap()));
            }
        }
    }

    #[test]
    fn fingerprint_text_round_trip() {
        let f = FingerprintBits::parse("0110").unwrap();
        assert_eq!(f.to_string(), "0110");
        assert!(FingerprintBits::parse("01?").is_err());
    }

    #[test]
    fn laplace_rejects_bad_scale() {
        assert!(LaplaceSampler::new(0.0, 1).is_err());
        assert!(LaplaceSampler::new(-1.0, 1).is_err());
    }

    #[test]
    fn laplace_moments_and_symmetry() {
        let b = 2.5;
        let n = 1_000_000;
        let xs = LaplaceSampler::new(b, 99).unwrap().draws(n);
        let mean = xs.iter().sum::<f64>() / n as f64;
        assert!(mean.abs() < 3.0 * 5.0 * b / (n as f64).sqrt(), "{mean}");
        let mad = xs.iter().map(|x| x.abs()).sum::<f64>() / n as f64;
        assert!((mad - b).abs() < 0.01 * b, "{mad}");
        let pos = xs[..100_000].iter().filter(|&&x| x > 0.0).count() as f64 / 1e5;
        assert!((pos - 0.5).abs() < 0.01);
    }

    #[test]
    fn laplace_stream_reproducible() {
        let a = LaplaceSampler::new(1.0, 7).unwrap().draws(10);
        let b = LaplaceSampler::new(1.0, 7).unwrap().draws(10);
        assert_eq!(a, b);
    }
}
