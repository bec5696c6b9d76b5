//! Versioned binary containers for ciphertexts and keys.
//!
//! Ciphertext layout (integers little-endian):
//!
//! ```text
//! "BFHE" | version u8 | scheme u8 | round u64 | level u8 | chunk index u32
//!        | chunk count u32 | scale exponent u16 | payload length u64
//!        | payload | CRC-32 u32
//! ```
//!
//! The CRC covers every byte before it. An RNS payload is `c0` then `c1`,
//! each written limb by limb with residues as `u64`; a slot payload is the
//! slot values as `f64`.

use crate::bytes::{Reader, Short};

use super::ckks::{CkksPublicKey, CkksSecretKey};
use super::{
    Ciphertext, FheError, Payload, PublicKey, PublicMaterial, Result, RoundId, SchemeTag, SecretKey, SecretMaterial,
};

pub const CIPHERTEXT_MAGIC: &[u8; 4] = b"BFHE";
pub const PUBLIC_KEY_MAGIC: &[u8; 4] = b"BFPK";
pub const SECRET_KEY_MAGIC: &[u8; 4] = b"BFSK";
pub const FORMAT_VERSION: u8 = 1;
/// Bytes before the payload.
pub const CIPHERTEXT_HEADER_BYTES: usize = 4 + 1 + 1 + 8 + 1 + 4 + 4 + 2 + 8;

impl From<Short> for FheError {
    fn from(s: Short) -> Self {
        FheError::Truncated {
            needed: s.needed,
            available: s.available,
        }
    }
}

fn push_crc(out: &mut Vec<u8>) {
    let crc = crc32fast::hash(out);
    out.extend_from_slice(&crc.to_le_bytes());
}

fn check_crc(bytes: &[u8], body_end: usize) -> Result<()> {
    let needed = body_end + 4;
    if bytes.len() < needed {
        return Err(FheError::Truncated {
            needed,
            available: bytes.len(),
        });
    }
    let stored = u32::from_le_bytes(bytes[body_end..needed].try_into().unwrap());
    if crc32fast::hash(&bytes[..body_end]) != stored {
        return Err(FheError::Checksum);
    }
    Ok(())
}

fn read_preamble(r: &mut Reader<'_>, magic: &[u8; 4]) -> Result<SchemeTag> {
    if r.take(4)? != magic {
        return Err(FheError::BadMagic);
    }
    let version = r.u8()?;
    if version != FORMAT_VERSION {
        return Err(FheError::Version(version));
    }
    let tag = r.u8()?;
    SchemeTag::from_byte(tag).ok_or_else(|| FheError::Malformed(format!("unknown scheme tag {tag}")))
}

fn write_limbs(out: &mut Vec<u8>, limbs: &[Vec<u64>]) {
    for limb in limbs {
        for x in limb {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
}

fn read_limbs(r: &mut Reader<'_>, count: usize, n: usize) -> Result<Vec<Vec<u64>>> {
    (0..count)
        .map(|_| {
            let raw = r.take(n * 8)?;
            Ok(raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
        })
        .collect()
}

/// Length of the payload section of `ct`.
pub fn payload_len(ct: &Ciphertext) -> usize {
    match &ct.payload {
        Payload::Slots(s) => s.len() * 8,
        Payload::Rns { c0, c1 } => c0.iter().chain(c1).map(|l| l.len() * 8).sum(),
    }
}

/// Total container size of `ct` in bytes.
pub fn serialized_len(ct: &Ciphertext) -> usize {
    CIPHERTEXT_HEADER_BYTES + payload_len(ct) + 4
}

pub fn serialize_ciphertext(ct: &Ciphertext) -> Vec<u8> {
    let mut out = Vec::with_capacity(serialized_len(ct));
    out.extend_from_slice(CIPHERTEXT_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(ct.scheme.to_byte());
    out.extend_from_slice(&ct.round.0.to_le_bytes());
    out.push(ct.level);
    out.extend_from_slice(&ct.chunk_index.to_le_bytes());
    out.extend_from_slice(&ct.chunk_count.to_le_bytes());
    out.extend_from_slice(&ct.scale_bits.to_le_bytes());
    out.extend_from_slice(&(payload_len(ct) as u64).to_le_bytes());
    match &ct.payload {
        Payload::Slots(s) => {
            for v in s {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::Rns { c0, c1 } => {
            write_limbs(&mut out, c0);
            write_limbs(&mut out, c1);
        }
    }
    push_crc(&mut out);
    out
}

/// Parses one ciphertext from the front of `bytes`; returns it with the
/// number of bytes consumed.
pub fn deserialize_ciphertext_prefix(bytes: &[u8]) -> Result<(Ciphertext, usize)> {
    let mut r = Reader::new(bytes);
    let scheme = read_preamble(&mut r, CIPHERTEXT_MAGIC)?;
    let round = RoundId(r.u64()?);
    let level = r.u8()?;
    let chunk_index = r.u32()?;
    let chunk_count = r.u32()?;
    let scale_bits = r.u16()?;
    let len = r.u64()?;
    let len = usize::try_from(len).map_err(|_| FheError::Malformed("payload length overflow".into()))?;
    let body_end = CIPHERTEXT_HEADER_BYTES
        .checked_add(len)
        .ok_or_else(|| FheError::Malformed("payload length overflow".into()))?;
    check_crc(bytes, body_end)?;
    if chunk_count == 0 || chunk_index >= chunk_count {
        return Err(FheError::Malformed(format!("chunk {chunk_index} of {chunk_count}")));
    }
    let payload = match scheme {
        SchemeTag::Oracle => {
            if len % 8 != 0 {
                return Err(FheError::Malformed("slot payload is not a whole number of f64".into()));
            }
            let raw = r.take(len)?;
            Payload::Slots(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        SchemeTag::Ckks => {
            let limbs = level as usize + 1;
            let per_poly = len / 2;
            if len % (16 * limbs) != 0 || !(per_poly / (8 * limbs)).is_power_of_two() {
                return Err(FheError::Malformed(format!(
                    "payload of {len} bytes does not hold two {limbs}-limb polynomials"
                )));
            }
            let n = per_poly / (8 * limbs);
            let c0 = read_limbs(&mut r, limbs, n)?;
            let c1 = read_limbs(&mut r, limbs, n)?;
            Payload::Rns { c0, c1 }
        }
    };
    Ok((
        Ciphertext {
            scheme,
            round,
            level,
            scale_bits,
            chunk_index,
            chunk_count,
            payload,
        },
        body_end + 4,
    ))
}

/// Parses a ciphertext that must span all of `bytes`.
pub fn deserialize_ciphertext(bytes: &[u8]) -> Result<Ciphertext> {
    let (ct, used) = deserialize_ciphertext_prefix(bytes)?;
    if used != bytes.len() {
        return Err(FheError::Malformed(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(ct)
}

pub fn serialize_public_key(pk: &PublicKey) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(PUBLIC_KEY_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(pk.scheme().to_byte());
    out.extend_from_slice(&pk.round.0.to_le_bytes());
    out.extend_from_slice(&pk.key_id.to_le_bytes());
    if let PublicMaterial::Ckks(k) = &pk.material {
        let n = k.a.first().map_or(0, Vec::len);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.push(k.a.len() as u8);
        write_limbs(&mut out, &k.b);
        write_limbs(&mut out, &k.a);
    }
    push_crc(&mut out);
    out
}

pub fn deserialize_public_key(bytes: &[u8]) -> Result<PublicKey> {
    let body_end = bytes.len().checked_sub(4).ok_or(FheError::Truncated {
        needed: 4,
        available: bytes.len(),
    })?;
    let mut r = Reader::new(&bytes[..body_end]);
    let scheme = read_preamble(&mut r, PUBLIC_KEY_MAGIC)?;
    let round = RoundId(r.u64()?);
    let key_id = r.u64()?;
    let material = match scheme {
        SchemeTag::Oracle => PublicMaterial::Oracle,
        SchemeTag::Ckks => {
            let n = r.u32()? as usize;
            let limbs = r.u8()? as usize;
            if !n.is_power_of_two() {
                return Err(FheError::Malformed(format!("ring dimension {n}")));
            }
            let b = read_limbs(&mut r, limbs, n)?;
            let a = read_limbs(&mut r, limbs, n)?;
            PublicMaterial::Ckks(CkksPublicKey { b, a })
        }
    };
    if r.remaining() != 0 {
        return Err(FheError::Malformed("trailing bytes in public key".into()));
    }
    check_crc(bytes, body_end)?;
    Ok(PublicKey {
        round,
        key_id,
        material,
    })
}

pub fn serialize_secret_key(sk: &SecretKey) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(SECRET_KEY_MAGIC);
    out.push(FORMAT_VERSION);
    out.push(sk.scheme().to_byte());
    out.extend_from_slice(&sk.round.0.to_le_bytes());
    out.extend_from_slice(&sk.key_id.to_le_bytes());
    if let SecretMaterial::Ckks(k) = &sk.material {
        out.extend_from_slice(&(k.coeffs.len() as u32).to_le_bytes());
        out.extend(k.coeffs.iter().map(|&c| c as u8));
    }
    push_crc(&mut out);
    out
}

pub fn deserialize_secret_key(bytes: &[u8]) -> Result<SecretKey> {
    let body_end = bytes.len().checked_sub(4).ok_or(FheError::Truncated {
        needed: 4,
        available: bytes.len(),
    })?;
    let mut r = Reader::new(&bytes[..body_end]);
    let scheme = read_preamble(&mut r, SECRET_KEY_MAGIC)?;
    let round = RoundId(r.u64()?);
    let key_id = r.u64()?;
    let material = match scheme {
        SchemeTag::Oracle => SecretMaterial::Oracle,
        SchemeTag::Ckks => {
            let n = r.u32()? as usize;
            let raw = r.take(n)?;
            let coeffs: Vec<i8> = raw.iter().map(|&b| b as i8).collect();
            if coeffs.iter().any(|c| !(-1..=1).contains(c)) {
                return Err(FheError::Malformed("secret key is not ternary".into()));
            }
            SecretMaterial::Ckks(CkksSecretKey { coeffs })
        }
    };
    if r.remaining() != 0 {
        return Err(FheError::Malformed("trailing bytes in secret key".into()));
    }
    check_crc(bytes, body_end)?;
    Ok(SecretKey {
        round,
        key_id,
        material,
    })
}
