//! Pluggable homomorphic backends behind one contract.
//!
//! [`Backend::Oracle`] carries plaintext slots and tracks levels, scale and
//! round tags exactly like the real scheme but with zero noise. It is the
//! reference the approximate [`Backend::Ckks`] backend is tested against.
//!
//! Every ciphertext carries the round id of the key that produced it. Round
//! tags, scheme tags, levels and scales are checked here, before either
//! backend touches the payload.

pub mod ckks;
pub mod codec;
pub mod oracle;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ParamMatrix, Role};

/// Largest plaintext magnitude accepted by [`Backend::encrypt_vector`].
pub const VALUE_BOUND: f64 = 1024.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FheError {
    #[error("unsupported parameters: {0}")]
    UnsupportedParams(String),
    #[error("{len} values exceed the slot capacity of {capacity}")]
    SlotOverflow { len: usize, capacity: usize },
    #[error("value {value} exceeds the magnitude bound {VALUE_BOUND}")]
    MagnitudeBound { value: f64 },
    #[error("non-finite value in plaintext")]
    NonFinite,
    #[error("key round {expected} does not match ciphertext round {found}")]
    RoundMismatch { expected: RoundId, found: RoundId },
    #[error("key does not belong to this round's key pair")]
    WrongKey,
    #[error("operands are at different levels ({0} vs {1})")]
    LevelMismatch(u8, u8),
    #[error("operands have different scales (2^{0} vs 2^{1})")]
    ScaleMismatch(u16, u16),
    #[error("no modulus levels left for a rescale")]
    LevelExhausted,
    #[error("scheme mismatch: expected {expected:?}, found {found:?}")]
    SchemeMismatch { expected: SchemeTag, found: SchemeTag },
    #[error("chunk layout mismatch: {0}")]
    ChunkMismatch(String),
    #[error("payload does not fit these parameters: {0}")]
    BadPayload(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported format version {0}")]
    Version(u8),
    #[error("truncated input: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("checksum mismatch")]
    Checksum,
    #[error("malformed encoding: {0}")]
    Malformed(String),
}

pub type Result<T, E = FheError> = std::result::Result<T, E>;

/// Identifies one round's key pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
pub struct RoundId(pub u64);

impl fmt::Display for RoundId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchemeTag {
    Oracle,
    Ckks,
}

impl SchemeTag {
    pub fn to_byte(self) -> u8 {
        match self {
            SchemeTag::Oracle => 0,
            SchemeTag::Ckks => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(SchemeTag::Oracle),
            1 => Some(SchemeTag::Ckks),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SecurityNote {
    /// Parameters chosen for a realistic security level.
    Production,
    /// Reduced ring dimension for fast tests; not secure.
    Test,
}

/// Scheme parameters: ring dimension, fixed-point scale and the bit sizes of
/// the modulus chain. The last prime of the chain is the special prime; the
/// ones before it carry data, so a chain of `k` primes gives `k - 2`
/// rescales.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FheParams {
    pub scheme: SchemeTag,
    pub ring_dim: usize,
    pub scale_bits: u16,
    pub modulus_chain_bits: Vec<u32>,
    pub security: SecurityNote,
}

impl FheParams {
    /// `N = 2^14`, scale `2^20`, chain `[60, 40, 40, 60]`.
    pub fn production() -> Self {
        Self {
            scheme: SchemeTag::Ckks,
            ring_dim: 1 << 14,
            scale_bits: 20,
            modulus_chain_bits: vec![60, 40, 40, 60],
            security: SecurityNote::Production,
        }
    }

    /// Desk-scale profile: `N = 2^12` with the same chain. Scale `2^40`
    /// matches the 40-bit inner primes; see the README for the precision
    /// trade-off against the production scale.
    pub fn test() -> Self {
        Self {
            scheme: SchemeTag::Ckks,
            ring_dim: 1 << 12,
            scale_bits: 40,
            modulus_chain_bits: vec![60, 40, 40, 60],
            security: SecurityNote::Test,
        }
    }

    /// Same shape as [`FheParams::test`] but served by the exact backend.
    pub fn oracle() -> Self {
        Self {
            scheme: SchemeTag::Oracle,
            ..Self::test()
        }
    }

    pub fn with_scheme(mut self, scheme: SchemeTag) -> Self {
        self.scheme = scheme;
        self
    }

    /// Values packed into one ciphertext.
    pub fn slot_capacity(&self) -> usize {
        self.ring_dim / 2
    }

    /// Rescales available to a fresh ciphertext.
    pub fn levels(&self) -> u8 {
        self.modulus_chain_bits.len().saturating_sub(2) as u8
    }

    pub fn scale(&self) -> f64 {
        2f64.powi(self.scale_bits as i32)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.ring_dim.is_power_of_two() || self.ring_dim < 8 {
            return Err(FheError::UnsupportedParams(format!(
                "ring dimension {} is not a power of two >= 8",
                self.ring_dim
            )));
        }
        if self.modulus_chain_bits.len() < 2 {
            return Err(FheError::UnsupportedParams(
                "modulus chain needs at least the two outer primes".into(),
            ));
        }
        if self.modulus_chain_bits.len() > 255 {
            return Err(FheError::UnsupportedParams("modulus chain too long".into()));
        }
        if self.scheme == SchemeTag::Ckks {
            if !(1 << 10..=1 << 16).contains(&self.ring_dim) {
                return Err(FheError::UnsupportedParams(format!(
                    "ring dimension {} outside 2^10..=2^16",
                    self.ring_dim
                )));
            }
            if let Some(b) = self.modulus_chain_bits.iter().find(|b| !(20..=61).contains(*b)) {
                return Err(FheError::UnsupportedParams(format!("prime size {b} outside 20..=61 bits")));
            }
            // the first prime must hold scale * bound with headroom for noise
            let first = self.modulus_chain_bits[0];
            if self.scale_bits as u32 + 12 > first {
                return Err(FheError::UnsupportedParams(format!(
                    "scale 2^{} leaves no headroom under the {}-bit base prime",
                    self.scale_bits, first
                )));
            }
        }
        Ok(())
    }
}

/// Key material that lets anyone encrypt for a round.
#[derive(Debug, Clone, PartialEq)]
pub struct PublicKey {
    pub(crate) round: RoundId,
    pub(crate) key_id: u64,
    pub(crate) material: PublicMaterial,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum PublicMaterial {
    Oracle,
    Ckks(ckks::CkksPublicKey),
}

/// Key material that decrypts a round's ciphertexts.
#[derive(Debug, Clone, PartialEq)]
pub struct SecretKey {
    pub(crate) round: RoundId,
    pub(crate) key_id: u64,
    pub(crate) material: SecretMaterial,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum SecretMaterial {
    Oracle,
    Ckks(ckks::CkksSecretKey),
}

impl PublicKey {
    pub fn round(&self) -> RoundId {
        self.round
    }

    pub fn scheme(&self) -> SchemeTag {
        match self.material {
            PublicMaterial::Oracle => SchemeTag::Oracle,
            PublicMaterial::Ckks(_) => SchemeTag::Ckks,
        }
    }

    /// Random identifier shared by both halves of a key pair.
    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

impl SecretKey {
    pub fn round(&self) -> RoundId {
        self.round
    }

    pub fn scheme(&self) -> SchemeTag {
        match self.material {
            SecretMaterial::Oracle => SchemeTag::Oracle,
            SecretMaterial::Ckks(_) => SchemeTag::Ckks,
        }
    }

    pub fn key_id(&self) -> u64 {
        self.key_id
    }
}

/// A public/secret key pair bound to one round.
#[derive(Debug, Clone, PartialEq)]
pub struct FheKeyPair {
    pub public: PublicKey,
    pub secret: SecretKey,
}

impl FheKeyPair {
    pub fn round(&self) -> RoundId {
        self.public.round
    }
}

/// Slot payload of a ciphertext.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Exact slot values (oracle backend).
    Slots(Vec<f64>),
    /// Two ring elements in coefficient form, one residue vector per limb.
    Rns { c0: Vec<Vec<u64>>, c1: Vec<Vec<u64>> },
}

/// An encrypted vector of up to `slot_capacity` values.
#[derive(Debug, Clone, PartialEq)]
pub struct Ciphertext {
    pub(crate) scheme: SchemeTag,
    pub(crate) round: RoundId,
    pub(crate) level: u8,
    pub(crate) scale_bits: u16,
    pub(crate) chunk_index: u32,
    pub(crate) chunk_count: u32,
    pub(crate) payload: Payload,
}

impl Ciphertext {
    pub fn scheme(&self) -> SchemeTag {
        self.scheme
    }

    pub fn round(&self) -> RoundId {
        self.round
    }

    /// Remaining rescales.
    pub fn level(&self) -> u8 {
        self.level
    }

    pub fn scale_bits(&self) -> u16 {
        self.scale_bits
    }

    pub fn chunk_index(&self) -> u32 {
        self.chunk_index
    }

    pub fn chunk_count(&self) -> u32 {
        self.chunk_count
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub(crate) fn with_chunk(mut self, index: u32, count: u32) -> Self {
        self.chunk_index = index;
        self.chunk_count = count;
        self
    }
}

/// Plaintext right-hand side of [`Backend::mul_plain`].
#[derive(Debug, Clone, PartialEq)]
pub enum Plain {
    Scalar(f64),
    /// Slot-wise multiplier; shorter vectors are zero-padded.
    Vector(Vec<f64>),
}

/// A parameter matrix split into slot-sized encrypted chunks.
#[derive(Debug, Clone, PartialEq)]
pub struct EncryptedMatrix {
    pub index: usize,
    pub shape: Vec<usize>,
    pub role: Role,
    pub chunks: Vec<Ciphertext>,
}

impl EncryptedMatrix {
    pub fn value_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn round(&self) -> Option<RoundId> {
        self.chunks.first().map(Ciphertext::round)
    }
}

/// Number of slot-sized chunks needed for `values` entries.
pub fn chunk_count(values: usize, slot_capacity: usize) -> usize {
    values.div_ceil(slot_capacity).max(1)
}

/// The homomorphic backend selected by [`FheParams::scheme`].
#[derive(Debug, Clone)]
pub enum Backend {
    Oracle(oracle::OracleBackend),
    Ckks(ckks::CkksBackend),
}

impl Backend {
    pub fn new(params: FheParams) -> Result<Self> {
        params.validate()?;
        Ok(match params.scheme {
            SchemeTag::Oracle => Backend::Oracle(oracle::OracleBackend::new(params)),
            SchemeTag::Ckks => Backend::Ckks(ckks::CkksBackend::new(params)?),
        })
    }

    pub fn params(&self) -> &FheParams {
        match self {
            Backend::Oracle(b) => b.params(),
            Backend::Ckks(b) => b.params(),
        }
    }

    pub fn scheme(&self) -> SchemeTag {
        self.params().scheme
    }

    pub fn slot_capacity(&self) -> usize {
        self.params().slot_capacity()
    }

    /// Generates a key pair tagged with `round`.
    pub fn keygen<R: Rng + ?Sized>(&self, rng: &mut R, round: RoundId) -> Result<FheKeyPair> {
        let key_id = rng.random::<u64>();
        let (public, secret) = match self {
            Backend::Oracle(_) => (PublicMaterial::Oracle, SecretMaterial::Oracle),
            Backend::Ckks(b) => {
                let (pk, sk) = b.keygen(rng);
                (PublicMaterial::Ckks(pk), SecretMaterial::Ckks(sk))
            }
        };
        Ok(FheKeyPair {
            public: PublicKey {
                round,
                key_id,
                material: public,
            },
            secret: SecretKey {
                round,
                key_id,
                material: secret,
            },
        })
    }

    /// Encrypts up to `slot_capacity` values bounded by [`VALUE_BOUND`].
    pub fn encrypt_vector<R: Rng + ?Sized>(&self, pk: &PublicKey, values: &[f64], rng: &mut R) -> Result<Ciphertext> {
        self.expect_scheme(pk.scheme())?;
        let capacity = self.slot_capacity();
        if values.len() > capacity {
            return Err(FheError::SlotOverflow {
                len: values.len(),
                capacity,
            });
        }
        for &v in values {
            if !v.is_finite() {
                return Err(FheError::NonFinite);
            }
            if v.abs() > VALUE_BOUND {
                return Err(FheError::MagnitudeBound { value: v });
            }
        }
        let payload = match (self, &pk.material) {
            (Backend::Oracle(b), PublicMaterial::Oracle) => b.encrypt(values),
            (Backend::Ckks(b), PublicMaterial::Ckks(k)) => b.encrypt(k, values, rng),
            _ => unreachable!("scheme checked above"),
        };
        Ok(Ciphertext {
            scheme: self.scheme(),
            round: pk.round,
            level: self.params().levels(),
            scale_bits: self.params().scale_bits,
            chunk_index: 0,
            chunk_count: 1,
            payload,
        })
    }

    /// Decrypts all slots. Keys from another round are rejected before any
    /// arithmetic happens.
    pub fn decrypt_vector(&self, sk: &SecretKey, ct: &Ciphertext) -> Result<Vec<f64>> {
        if sk.round != ct.round {
            return Err(FheError::RoundMismatch {
                expected: sk.round,
                found: ct.round,
            });
        }
        self.expect_scheme(sk.scheme())?;
        self.expect_scheme(ct.scheme)?;
        match (self, &sk.material) {
            (Backend::Oracle(b), SecretMaterial::Oracle) => b.decrypt(ct),
            (Backend::Ckks(b), SecretMaterial::Ckks(k)) => b.decrypt(k, ct),
            _ => unreachable!("scheme checked above"),
        }
    }

    /// Slot-wise sum. Operands must share round, level and scale.
    pub fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Ciphertext> {
        self.expect_scheme(a.scheme)?;
        self.expect_scheme(b.scheme)?;
        if a.round != b.round {
            return Err(FheError::RoundMismatch {
                expected: a.round,
                found: b.round,
            });
        }
        if a.level != b.level {
            return Err(FheError::LevelMismatch(a.level, b.level));
        }
        if a.scale_bits != b.scale_bits {
            return Err(FheError::ScaleMismatch(a.scale_bits, b.scale_bits));
        }
        let payload = match self {
            Backend::Oracle(o) => o.add(a, b)?,
            Backend::Ckks(c) => c.add(a, b)?,
        };
        Ok(Ciphertext { payload, ..a.clone() })
    }

    /// Slot-wise product with a plaintext, followed by a rescale. Consumes
    /// one level and leaves the scale unchanged.
    pub fn mul_plain(&self, ct: &Ciphertext, plain: &Plain) -> Result<Ciphertext> {
        self.expect_scheme(ct.scheme)?;
        if ct.level == 0 {
            return Err(FheError::LevelExhausted);
        }
        match plain {
            Plain::Scalar(s) if !s.is_finite() => return Err(FheError::NonFinite),
            Plain::Vector(v) => {
                if v.len() > self.slot_capacity() {
                    return Err(FheError::SlotOverflow {
                        len: v.len(),
                        capacity: self.slot_capacity(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(FheError::NonFinite);
                }
            }
            _ => {}
        }
        let payload = match self {
            Backend::Oracle(o) => o.mul_plain(ct, plain)?,
            Backend::Ckks(c) => c.mul_plain(ct, plain)?,
        };
        Ok(Ciphertext {
            payload,
            level: ct.level - 1,
            ..ct.clone()
        })
    }

    /// Encrypts a matrix as `ceil(len / slot_capacity)` chunks, the last one
    /// zero-padded.
    pub fn encrypt_matrix<R: Rng + ?Sized>(&self, pk: &PublicKey, m: &ParamMatrix, rng: &mut R) -> Result<EncryptedMatrix> {
        let capacity = self.slot_capacity();
        let count = chunk_count(m.len(), capacity);
        let mut chunks = Vec::with_capacity(count);
        for k in 0..count {
            let start = (k * capacity).min(m.len());
            let end = ((k + 1) * capacity).min(m.len());
            let ct = self.encrypt_vector(pk, &m.values()[start..end], rng)?;
            chunks.push(ct.with_chunk(k as u32, count as u32));
        }
        Ok(EncryptedMatrix {
            index: m.index(),
            shape: m.shape().to_vec(),
            role: m.role(),
            chunks,
        })
    }

    pub fn decrypt_matrix(&self, sk: &SecretKey, em: &EncryptedMatrix) -> Result<ParamMatrix> {
        let total = em.value_count();
        let capacity = self.slot_capacity();
        let expected = chunk_count(total, capacity);
        if em.chunks.len() != expected {
            return Err(FheError::ChunkMismatch(format!(
                "matrix {} needs {expected} chunks, has {}",
                em.index,
                em.chunks.len()
            )));
        }
        let mut values = Vec::with_capacity(total);
        for (k, ct) in em.chunks.iter().enumerate() {
            if ct.chunk_index as usize != k || ct.chunk_count as usize != expected {
                return Err(FheError::ChunkMismatch(format!(
                    "chunk {k} of matrix {} is tagged {}/{}",
                    em.index, ct.chunk_index, ct.chunk_count
                )));
            }
            let slots = self.decrypt_vector(sk, ct)?;
            let take = (total - values.len()).min(capacity);
            values.extend_from_slice(&slots[..take]);
        }
        ParamMatrix::new(em.index, em.shape.clone(), values, em.role)
            .map_err(|e| FheError::BadPayload(e.to_string()))
    }

    fn expect_scheme(&self, found: SchemeTag) -> Result<()> {
        let expected = self.scheme();
        if expected != found {
            return Err(FheError::SchemeMismatch { expected, found });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunk_counts() {
        assert_eq!(chunk_count(10_000, 4096), 3);
        assert_eq!(chunk_count(493_920, 8192), 61);
        assert_eq!(chunk_count(1, 2048), 1);
        assert_eq!(chunk_count(2048, 2048), 1);
    }

    #[test]
    fn production_profile_has_two_levels() {
        let p = FheParams::production();
        assert_eq!(p.levels(), 2);
        assert_eq!(p.slot_capacity(), 8192);
        p.validate().unwrap();
    }

    #[test]
    fn single_prime_chain_is_rejected() {
        let p = FheParams {
            modulus_chain_bits: vec![60],
            ..FheParams::test()
        };
        assert!(matches!(p.validate(), Err(FheError::UnsupportedParams(_))));
        assert!(Backend::new(p).is_err());
    }

    #[test]
    fn non_power_of_two_ring_is_rejected() {
        let p = FheParams {
            ring_dim: 3000,
            ..FheParams::test()
        };
        assert!(p.validate().is_err());
    }
}
