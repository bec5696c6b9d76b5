//! Framed protocol messages and their payload encodings.
//!
//! Frame layout (integers little-endian):
//!
//! | size | field                         |
//! |------|-------------------------------|
//! | 4    | magic `BFL1`                  |
//! | 1    | message kind                  |
//! | 8    | round id                      |
//! | 4    | sender id                     |
//! | 8    | payload length                |
//! | n    | payload                       |
//! | 4    | CRC-32 of everything above    |

use std::io::Read;

use thiserror::Error;

use crate::bytes::{Reader, Short};
use crate::fhe::codec::{deserialize_ciphertext_prefix, serialize_ciphertext, serialized_len};
use crate::fhe::{EncryptedMatrix, FheError, RoundId};
use crate::model::{ModelError, ParamMatrix, Role, MAX_RANK};

pub const FRAME_MAGIC: &[u8; 4] = b"BFL1";
pub const FRAME_HEADER_BYTES: usize = 4 + 1 + 8 + 4 + 8;
pub const FRAME_TRAILER_BYTES: usize = 4;
pub const DEFAULT_FRAME_CAP: usize = 64 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {len} bytes exceeds the {cap}-byte cap")]
    CapExceeded { len: usize, cap: usize },
    #[error("bad frame magic")]
    BadMagic,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("truncated: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("frame checksum mismatch")]
    Checksum,
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed payload: {0}")]
    Malformed(String),
    #[error("message for round {found} during round {expected}")]
    RoundMismatch { expected: RoundId, found: RoundId },
    #[error("expected a {expected:?} message, got {found:?}")]
    UnexpectedKind { expected: MessageKind, found: MessageKind },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Fhe(#[from] FheError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<Short> for WireError {
    fn from(s: Short) -> Self {
        WireError::Truncated {
            needed: s.needed,
            available: s.available,
        }
    }
}

pub type Result<T, E = WireError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
pub enum MessageKind {
    PublicKey,
    RequestRow,
    ClientUpdate,
    AggregationComplete,
    PrivateKey,
    GlobalModel,
}

impl MessageKind {
    pub const ALL: [MessageKind; 6] = [
        MessageKind::PublicKey,
        MessageKind::RequestRow,
        MessageKind::ClientUpdate,
        MessageKind::AggregationComplete,
        MessageKind::PrivateKey,
        MessageKind::GlobalModel,
    ];

    pub fn to_byte(self) -> u8 {
        self as u8 + 1
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        Self::ALL.get((b as usize).wrapping_sub(1)).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub kind: MessageKind,
    pub round: RoundId,
    pub sender: u32,
    pub payload: Vec<u8>,
}

impl WireMessage {
    pub fn new(kind: MessageKind, round: RoundId, sender: u32, payload: Vec<u8>) -> Self {
        Self {
            kind,
            round,
            sender,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        FRAME_HEADER_BYTES + self.payload.len() + FRAME_TRAILER_BYTES
    }

    /// Fails unless the message belongs to `round` and has kind `kind`.
    pub fn expect(&self, kind: MessageKind, round: RoundId) -> Result<()> {
        if self.round != round {
            return Err(WireError::RoundMismatch {
                expected: round,
                found: self.round,
            });
        }
        if self.kind != kind {
            return Err(WireError::UnexpectedKind {
                expected: kind,
                found: self.kind,
            });
        }
        Ok(())
    }
}

pub fn encode_message(msg: &WireMessage, cap: usize) -> Result<Vec<u8>> {
    let len = msg.frame_len();
    if len > cap {
        return Err(WireError::CapExceeded { len, cap });
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(FRAME_MAGIC);
    out.push(msg.kind.to_byte());
    out.extend_from_slice(&msg.round.0.to_le_bytes());
    out.extend_from_slice(&msg.sender.to_le_bytes());
    out.extend_from_slice(&(msg.payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&msg.payload);
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

/// Total frame length announced by a header, after checking magic, kind
/// and cap.
fn frame_len_from_header(header: &[u8], cap: usize) -> Result<usize> {
    if &header[..4] != FRAME_MAGIC {
        return Err(WireError::BadMagic);
    }
    if MessageKind::from_byte(header[4]).is_none() {
        return Err(WireError::UnknownKind(header[4]));
    }
    let payload = u64::from_le_bytes(header[17..25].try_into().unwrap());
    let len = usize::try_from(payload)
        .ok()
        .and_then(|p| p.checked_add(FRAME_HEADER_BYTES + FRAME_TRAILER_BYTES))
        .unwrap_or(usize::MAX);
    if len > cap {
        return Err(WireError::CapExceeded { len, cap });
    }
    Ok(len)
}

/// Parses one frame from the front of `bytes`; returns the message and the
/// bytes consumed.
pub fn decode_message_prefix(bytes: &[u8], cap: usize) -> Result<(WireMessage, usize)> {
    if bytes.len() < FRAME_HEADER_BYTES {
        return Err(WireError::Truncated {
            needed: FRAME_HEADER_BYTES,
            available: bytes.len(),
        });
    }
    let len = frame_len_from_header(&bytes[..FRAME_HEADER_BYTES], cap)?;
    if bytes.len() < len {
        return Err(WireError::Truncated {
            needed: len,
            available: bytes.len(),
        });
    }
    let body = len - FRAME_TRAILER_BYTES;
    let stored = u32::from_le_bytes(bytes[body..len].try_into().unwrap());
    if crc32fast::hash(&bytes[..body]) != stored {
        return Err(WireError::Checksum);
    }
    let mut r = Reader::new(&bytes[..body]);
    r.take(4)?;
    let kind = MessageKind::from_byte(r.u8()?).expect("checked above");
    let round = RoundId(r.u64()?);
    let sender = r.u32()?;
    r.u64()?;
    let payload = r.take(r.remaining())?.to_vec();
    Ok((
        WireMessage {
            kind,
            round,
            sender,
            payload,
        },
        len,
    ))
}

/// Parses a buffer holding exactly one frame.
pub fn decode_message(bytes: &[u8], cap: usize) -> Result<WireMessage> {
    let (msg, used) = decode_message_prefix(bytes, cap)?;
    if used != bytes.len() {
        return Err(WireError::TrailingBytes(bytes.len() - used));
    }
    Ok(msg)
}

/// Reads the raw bytes of one frame from a stream. Returns `None` on a clean
/// end of stream before the first header byte.
pub fn read_frame<R: Read>(reader: &mut R, cap: usize) -> Result<Option<Vec<u8>>> {
    let mut header = [0u8; FRAME_HEADER_BYTES];
    let mut filled = 0;
    while filled < FRAME_HEADER_BYTES {
        match reader.read(&mut header[filled..])? {
            0 if filled == 0 => return Ok(None),
            0 => {
                return Err(WireError::Truncated {
                    needed: FRAME_HEADER_BYTES,
                    available: filled,
                })
            }
            n => filled += n,
        }
    }
    let len = frame_len_from_header(&header, cap)?;
    let mut frame = vec![0u8; len];
    frame[..FRAME_HEADER_BYTES].copy_from_slice(&header);
    reader.read_exact(&mut frame[FRAME_HEADER_BYTES..])?;
    Ok(Some(frame))
}

/// One matrix inside an update or global-model payload.
#[derive(Debug, Clone, PartialEq)]
pub enum Item {
    Plain(ParamMatrix),
    Encrypted(EncryptedMatrix),
}

const ITEM_PLAIN: u8 = 0;
const ITEM_ENCRYPTED: u8 = 1;

impl Item {
    pub fn index(&self) -> usize {
        match self {
            Item::Plain(m) => m.index(),
            Item::Encrypted(em) => em.index,
        }
    }

    pub fn is_encrypted(&self) -> bool {
        matches!(self, Item::Encrypted(_))
    }

    /// Serialized size of the matrix itself: the plaintext container or the
    /// sum of its ciphertext containers.
    pub fn body_len(&self) -> usize {
        match self {
            Item::Plain(m) => m.serialized_size(),
            Item::Encrypted(em) => em.chunks.iter().map(serialized_len).sum(),
        }
    }
}

pub fn encode_items(items: &[Item], out: &mut Vec<u8>) {
    out.extend_from_slice(&(items.len() as u32).to_le_bytes());
    for item in items {
        match item {
            Item::Plain(m) => {
                out.push(ITEM_PLAIN);
                out.extend_from_slice(&m.encode());
            }
            Item::Encrypted(em) => {
                out.push(ITEM_ENCRYPTED);
                out.extend_from_slice(&(em.index as u32).to_le_bytes());
                out.push(em.role.tag());
                out.push(em.shape.len() as u8);
                for d in &em.shape {
                    out.extend_from_slice(&(*d as u64).to_le_bytes());
                }
                out.extend_from_slice(&(em.chunks.len() as u32).to_le_bytes());
                for ct in &em.chunks {
                    out.extend_from_slice(&serialize_ciphertext(ct));
                }
            }
        }
    }
}

fn decode_items_from(r: &mut Reader<'_>, bytes: &[u8]) -> Result<Vec<Item>> {
    let count = r.u32()? as usize;
    let mut items = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        match r.u8()? {
            ITEM_PLAIN => {
                let (m, used) = ParamMatrix::decode(&bytes[r.position()..])?;
                r.take(used)?;
                items.push(Item::Plain(m));
            }
            ITEM_ENCRYPTED => {
                let index = r.u32()? as usize;
                let tag = r.u8()?;
                let role = Role::from_tag(tag).ok_or_else(|| WireError::Malformed(format!("role tag {tag}")))?;
                let rank = r.u8()? as usize;
                if rank > MAX_RANK {
                    return Err(WireError::Malformed(format!("rank {rank}")));
                }
                let shape = (0..rank).map(|_| Ok(r.u64()? as usize)).collect::<Result<Vec<_>>>()?;
                let chunks = r.u32()? as usize;
                let mut cts = Vec::with_capacity(chunks.min(1024));
                for _ in 0..chunks {
                    let (ct, used) = deserialize_ciphertext_prefix(&bytes[r.position()..])?;
                    r.take(used)?;
                    cts.push(ct);
                }
                items.push(Item::Encrypted(EncryptedMatrix {
                    index,
                    shape,
                    role,
                    chunks: cts,
                }));
            }
            tag => return Err(WireError::Malformed(format!("item tag {tag}"))),
        }
    }
    Ok(items)
}

fn finish<T>(r: &Reader<'_>, value: T) -> Result<T> {
    match r.remaining() {
        0 => Ok(value),
        n => Err(WireError::TrailingBytes(n)),
    }
}

pub fn decode_items(bytes: &[u8]) -> Result<Vec<Item>> {
    let mut r = Reader::new(bytes);
    let items = decode_items_from(&mut r, bytes)?;
    finish(&r, items)
}

/// Contents of a `ClientUpdate` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub t: u64,
    /// Serialized public key echoed back to the server (empty without
    /// encryption).
    pub public_key: Vec<u8>,
    pub items: Vec<Item>,
}

impl ClientUpdate {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.t.to_le_bytes());
        out.extend_from_slice(&(self.public_key.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.public_key);
        encode_items(&self.items, &mut out);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let t = r.u64()?;
        let pk_len = r.u32()? as usize;
        let public_key = r.take(pk_len)?.to_vec();
        let items = decode_items_from(&mut r, bytes)?;
        finish(&r, ClientUpdate { t, public_key, items })
    }

    /// Sum of [`Item::body_len`] over the carried matrices.
    pub fn matrix_bytes(&self) -> usize {
        self.items.iter().map(Item::body_len).sum()
    }
}
