//! Parameter containers shared by every other module.
//!
//! A model is an ordered list of parameter matrices indexed `1..=M`. Values
//! are held as `f64` in memory and narrowed to `f32` only when a matrix is
//! written to the wire, where each matrix costs `4 * len + 128` bytes.

use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Size of the fixed header that precedes every serialized matrix.
pub const MATRIX_HEADER_BYTES: usize = 128;
/// Bytes per value on the wire (IEEE-754 binary32).
pub const BYTES_PER_VALUE: usize = 4;
/// Maximum tensor rank the matrix header can describe.
pub const MAX_RANK: usize = 8;

const MATRIX_MAGIC: &[u8; 4] = b"BFPM";
const MATRIX_VERSION: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("shape {shape:?} describes {expected} values but {actual} were supplied")]
    ShapeMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("zero-sized dimension in shape {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("rank {0} exceeds the supported maximum of {MAX_RANK}")]
    RankTooLarge(usize),
    #[error("matrix at position {position} has index {found}, expected {expected}")]
    IndexOutOfOrder {
        position: usize,
        expected: usize,
        found: usize,
    },
    #[error("a model needs at least one parameter matrix")]
    EmptyModel,
    #[error("manifest describes {expected} values but data has {actual}")]
    ManifestMismatch { expected: usize, actual: usize },
    #[error("malformed matrix encoding: {0}")]
    Malformed(String),
    #[error("matrix checksum mismatch")]
    Checksum,
    #[error("registry line {line}: {reason}")]
    Registry { line: usize, reason: String },
    #[error("io error: {0}")]
    Io(String),
}

/// Whether a matrix holds layer weights or a bias vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Weight,
    Bias,
}

impl Role {
    pub(crate) fn tag(self) -> u8 {
        match self {
            Role::Weight => 0,
            Role::Bias => 1,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Role::Weight),
            1 => Some(Role::Bias),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Weight => "weight",
            Role::Bias => "bias",
        })
    }
}

/// One weight or bias tensor, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMatrix {
    index: usize,
    shape: Vec<usize>,
    values: Vec<f64>,
    role: Role,
}

impl ParamMatrix {
    /// Builds a matrix, checking that `shape` describes exactly `values.len()`
    /// entries. `index` is the 1-based position inside its model.
    pub fn new(index: usize, shape: Vec<usize>, values: Vec<f64>, role: Role) -> Result<Self, ModelError> {
        check_shape(&shape)?;
        let expected = shape.iter().product::<usize>();
        if expected != values.len() {
            return Err(ModelError::ShapeMismatch {
                shape,
                expected,
                actual: values.len(),
            });
        }
        Ok(Self {
            index,
            shape,
            values,
            role,
        })
    }

    pub fn zeros(index: usize, shape: Vec<usize>, role: Role) -> Result<Self, ModelError> {
        let len = shape.iter().product();
        Self::new(index, shape, vec![0.0; len], role)
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Same shape, role and index, new contents.
    pub fn with_values(&self, values: Vec<f64>) -> Result<Self, ModelError> {
        Self::new(self.index, self.shape.clone(), values, self.role)
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Bytes this matrix occupies on the wire.
    pub fn serialized_size(&self) -> usize {
        serialized_size_for(self.values.len())
    }

    /// Writes the 128-byte header followed by the values as little-endian
    /// `f32`.
    ///
    /// Header layout (all integers little-endian):
    ///
    /// | offset | size | field                                   |
    /// |--------|------|-----------------------------------------|
    /// | 0      | 4    | magic `BFPM`                            |
    /// | 4      | 1    | version (1)                             |
    /// | 5      | 1    | role (0 weight, 1 bias)                 |
    /// | 6      | 1    | rank                                    |
    /// | 7      | 1    | reserved, zero                          |
    /// | 8      | 4    | matrix index (1-based)                  |
    /// | 12     | 8    | value count                             |
    /// | 20     | 64   | up to eight dimensions, `u64` each      |
    /// | 84     | 40   | reserved, zero                          |
    /// | 124    | 4    | CRC-32 of bytes 0..124 and the payload  |
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![0u8; MATRIX_HEADER_BYTES];
        out[0..4].copy_from_slice(MATRIX_MAGIC);
        out[4] = MATRIX_VERSION;
        out[5] = self.role.tag();
        out[6] = self.shape.len() as u8;
        out[8..12].copy_from_slice(&(self.index as u32).to_le_bytes());
        out[12..20].copy_from_slice(&(self.values.len() as u64).to_le_bytes());
        for (k, d) in self.shape.iter().enumerate() {
            let at = 20 + 8 * k;
            out[at..at + 8].copy_from_slice(&(*d as u64).to_le_bytes());
        }
        out.reserve(self.values.len() * BYTES_PER_VALUE);
        for v in &self.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&out[..124]);
        hasher.update(&out[MATRIX_HEADER_BYTES..]);
        let crc = hasher.finalize();
        out[124..128].copy_from_slice(&crc.to_le_bytes());
        out
    }

    /// Parses one matrix from the front of `bytes`, returning it and the
    /// number of bytes consumed. Values come back widened from `f32`.
    pub fn decode(bytes: &[u8]) -> Result<(Self, usize), ModelError> {
        if bytes.len() < MATRIX_HEADER_BYTES {
            return Err(ModelError::Malformed("truncated header".into()));
        }
        if &bytes[0..4] != MATRIX_MAGIC {
            return Err(ModelError::Malformed("bad magic".into()));
        }
        if bytes[4] != MATRIX_VERSION {
            return Err(ModelError::Malformed(format!("unsupported version {}", bytes[4])));
        }
        let role = Role::from_tag(bytes[5])
            .ok_or_else(|| ModelError::Malformed(format!("unknown role tag {}", bytes[5])))?;
        let rank = bytes[6] as usize;
        if rank > MAX_RANK {
            return Err(ModelError::RankTooLarge(rank));
        }
        let index = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let count = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|k| {
                let at = 20 + 8 * k;
                u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()) as usize
            })
            .collect();
        let total = count
            .checked_mul(BYTES_PER_VALUE)
            .and_then(|b| b.checked_add(MATRIX_HEADER_BYTES))
            .ok_or_else(|| ModelError::Malformed("value count overflow".into()))?;
        if bytes.len() < total {
            return Err(ModelError::Malformed("truncated payload".into()));
        }
        let stored = u32::from_le_bytes(bytes[124..128].try_into().unwrap());
        let mut hasher = crc32fast::Hasher::new();
        hasher.update(&bytes[..124]);
        hasher.update(&bytes[MATRIX_HEADER_BYTES..total]);
        if hasher.finalize() != stored {
            return Err(ModelError::Checksum);
        }
        let values = bytes[MATRIX_HEADER_BYTES..total]
            .chunks_exact(BYTES_PER_VALUE)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        Ok((Self::new(index, shape, values, role)?, total))
    }
}

fn check_shape(shape: &[usize]) -> Result<(), ModelError> {
    if shape.len() > MAX_RANK {
        return Err(ModelError::RankTooLarge(shape.len()));
    }
    if shape.contains(&0) {
        return Err(ModelError::ZeroDimension(shape.to_vec()));
    }
    Ok(())
}

/// Wire size of a matrix holding `values` entries.
pub fn serialized_size_for(values: usize) -> usize {
    BYTES_PER_VALUE * values + MATRIX_HEADER_BYTES
}

/// Wire size of one matrix.
pub fn serialized_size(m: &ParamMatrix) -> usize {
    m.serialized_size()
}

/// Wire size of a whole model.
pub fn model_total_size(model: &ModelParams) -> usize {
    model.matrices().iter().map(ParamMatrix::serialized_size).sum()
}

/// An ordered, non-empty list of parameter matrices with indices `1..=M`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    matrices: Vec<ParamMatrix>,
}

impl ModelParams {
    pub fn new(matrices: Vec<ParamMatrix>) -> Result<Self, ModelError> {
        if matrices.is_empty() {
            return Err(ModelError::EmptyModel);
        }
        for (pos, m) in matrices.iter().enumerate() {
            if m.index != pos + 1 {
                return Err(ModelError::IndexOutOfOrder {
                    position: pos,
                    expected: pos + 1,
                    found: m.index,
                });
            }
        }
        Ok(Self { matrices })
    }

    /// Number of parameter matrices, `M`.
    pub fn len(&self) -> usize {
        self.matrices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matrices.is_empty()
    }

    pub fn matrices(&self) -> &[ParamMatrix] {
        &self.matrices
    }

    pub fn into_matrices(self) -> Vec<ParamMatrix> {
        self.matrices
    }

    /// Matrix by 1-based index.
    pub fn get(&self, index: usize) -> Option<&ParamMatrix> {
        index.checked_sub(1).and_then(|i| self.matrices.get(i))
    }

    pub fn param_count(&self) -> usize {
        self.matrices.iter().map(ParamMatrix::len).sum()
    }

    /// True when both models have the same shapes, position by position.
    pub fn compatible_with(&self, other: &ModelParams) -> bool {
        self.matrices.len() == other.matrices.len()
            && self
                .matrices
                .iter()
                .zip(&other.matrices)
                .all(|(a, b)| a.shape == b.shape)
    }

    pub fn total_size(&self) -> usize {
        model_total_size(self)
    }
}

/// Shape and role of each matrix, in model order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeManifest {
    pub entries: Vec<(Vec<usize>, Role)>,
}

impl ShapeManifest {
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(s, _)| s.iter().product::<usize>()).sum()
    }
}

/// Concatenates every matrix's values in model order.
pub fn flatten(model: &ModelParams) -> (Vec<f64>, ShapeManifest) {
    let mut data = Vec::with_capacity(model.param_count());
    let mut entries = Vec::with_capacity(model.len());
    for m in &model.matrices {
        data.extend_from_slice(&m.values);
        entries.push((m.shape.clone(), m.role));
    }
    (data, ShapeManifest { entries })
}

/// Inverse of [`flatten`].
pub fn unflatten(data: &[f64], manifest: &ShapeManifest) -> Result<ModelParams, ModelError> {
    let expected = manifest.total_len();
    if manifest.entries.is_empty() || expected != data.len() {
        return Err(ModelError::ManifestMismatch {
            expected,
            actual: data.len(),
        });
    }
    let mut offset = 0;
    let mut matrices = Vec::with_capacity(manifest.entries.len());
    for (pos, (shape, role)) in manifest.entries.iter().enumerate() {
        let len: usize = shape.iter().product();
        let values = data[offset..offset + len].to_vec();
        offset += len;
        matrices.push(ParamMatrix::new(pos + 1, shape.clone(), values, *role)?);
    }
    ModelParams::new(matrices)
}

/// One row of a [`ShapeRegistry`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegistryEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
}

impl RegistryEntry {
    pub fn param_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn byte_size(&self) -> usize {
        serialized_size_for(self.param_count())
    }
}

/// Named list of matrix shapes, used for byte accounting without holding
/// real weights.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShapeRegistry {
    pub name: String,
    pub entries: Vec<RegistryEntry>,
}

const LENET5_TABLE: &str = include_str!("../fixtures/lenet5.registry");

impl ShapeRegistry {
    /// The bundled LeNet-5 registry (10 matrices, 545,546 parameters).
    pub fn lenet5() -> Self {
        Self::parse("lenet5", LENET5_TABLE).expect("bundled registry parses")
    }

    /// Parses a plain-text table: one `name shape role` row per matrix, with
    /// shape written as `6x1x5x5`. Blank lines and `#` comments are skipped.
    pub fn parse(name: &str, text: &str) -> Result<Self, ModelError> {
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |reason: String| ModelError::Registry {
                line: lineno + 1,
                reason,
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() != 3 {
                return Err(err(format!("expected 3 columns, found {}", cols.len())));
            }
            let shape = cols[1]
                .split(['x', ','])
                .map(|d| d.trim().parse::<usize>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| err(format!("bad shape {:?}: {e}", cols[1])))?;
            check_shape(&shape).map_err(|e| err(e.to_string()))?;
            let role = match cols[2] {
                "weight" => Role::Weight,
                "bias" => Role::Bias,
                other => return Err(err(format!("unknown role {other:?}"))),
            };
            entries.push(RegistryEntry {
                name: cols[0].to_string(),
                shape,
                role,
            });
        }
        if entries.is_empty() {
            return Err(ModelError::EmptyModel);
        }
        Ok(Self {
            name: name.to_string(),
            entries,
        })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|e| ModelError::Io(e.to_string()))?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(&name, &text)
    }

    pub fn param_count(&self) -> usize {
        self.entries.iter().map(RegistryEntry::param_count).sum()
    }

    pub fn total_bytes(&self) -> usize {
        self.entries.iter().map(RegistryEntry::byte_size).sum()
    }

    /// An all-zero model with this registry's shapes.
    pub fn zero_model(&self) -> ModelParams {
        let matrices = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ParamMatrix::zeros(i + 1, e.shape.clone(), e.role).expect("registry shapes are valid"))
            .collect();
        ModelParams::new(matrices).expect("registry is non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(index: usize, values: Vec<f64>) -> ParamMatrix {
        let n = values.len();
        ParamMatrix::new(index, vec![n], values, Role::Weight).unwrap()
    }

    #[test]
    fn serialized_size_examples() {
        assert_eq!(serialized_size_for(150), 728);
        assert_eq!(serialized_size_for(6), 152);
        assert_eq!(serialized_size_for(0), 128);
    }

    #[test]
    fn model_total_size_examples() {
        let one = ModelParams::new(vec![m(1, vec![0.5])]).unwrap();
        assert_eq!(model_total_size(&one), 132);
        let two = ModelParams::new(vec![m(1, vec![0.0; 150]), m(2, vec![0.0; 6])]).unwrap();
        assert_eq!(model_total_size(&two), 880);
    }

    #[test]
    fn shape_must_match_values() {
        let err = ParamMatrix::new(1, vec![2, 3], vec![0.0; 5], Role::Weight).unwrap_err();
        assert!(matches!(err, ModelError::ShapeMismatch { expected: 6, actual: 5, .. }));
    }

    #[test]
    fn model_indices_must_be_sequential() {
        let err = ModelParams::new(vec![m(1, vec![1.0]), m(3, vec![1.0])]).unwrap_err();
        assert!(matches!(err, ModelError::IndexOutOfOrder { position: 1, .. }));
        assert_eq!(ModelParams::new(vec![]).unwrap_err(), ModelError::EmptyModel);
    }

    #[test]
    fn flatten_small_model() {
        let model = ModelParams::new(vec![m(1, vec![1.0, 2.0]), m(2, vec![3.0])]).unwrap();
        let (data, manifest) = flatten(&model);
        assert_eq!(data, vec![1.0, 2.0, 3.0]);
        let shapes: Vec<_> = manifest.entries.iter().map(|(s, _)| s.clone()).collect();
        assert_eq!(shapes, vec![vec![2], vec![1]]);
        assert_eq!(unflatten(&data, &manifest).unwrap(), model);
    }

    #[test]
    fn unflatten_rejects_empty_manifest() {
        let manifest = ShapeManifest { entries: vec![] };
        assert!(unflatten(&[1.0], &manifest).is_err());
    }

    #[test]
    fn encode_decode_roundtrip_narrows_to_f32() {
        let mat = ParamMatrix::new(4, vec![2, 2], vec![0.1, -2.5, 3.0, 1e-3], Role::Bias).unwrap();
        let bytes = mat.encode();
        assert_eq!(bytes.len(), mat.serialized_size());
        let (back, used) = ParamMatrix::decode(&bytes).unwrap();
        assert_eq!(used, bytes.len());
        assert_eq!(back.index(), 4);
        assert_eq!(back.role(), Role::Bias);
        assert_eq!(back.shape(), &[2, 2]);
        for (a, b) in back.values().iter().zip(mat.values()) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }

    #[test]
    fn decode_detects_corruption() {
        let mat = ParamMatrix::new(1, vec![3], vec![1.0, 2.0, 3.0], Role::Weight).unwrap();
        let mut bytes = mat.encode();
        bytes[130] ^= 0x40;
        assert_eq!(ParamMatrix::decode(&bytes).unwrap_err(), ModelError::Checksum);
        assert!(ParamMatrix::decode(&bytes[..100]).is_err());
    }

    #[test]
    fn registry_parse_errors_carry_line_numbers() {
        let err = ShapeRegistry::parse("x", "a 2x2 weight\nb 2y2 bias\n").unwrap_err();
        assert!(matches!(err, ModelError::Registry { line: 2, .. }));
    }
}
