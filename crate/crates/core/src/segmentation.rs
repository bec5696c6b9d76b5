//! Client model segmentation: which client sends which parameter matrix,
//! how a client assembles its response, and how the server averages the
//! contributions per matrix.
//!
//! Client ids and matrix indices are 1-based at this interface.

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::fhe::{Backend, EncryptedMatrix, FheError, Plain, PublicKey};
use crate::model::{ModelError, ModelParams, ParamMatrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SegmentationError {
    #[error("invalid parameters: M={m}, p={p}, c={c} (need M >= 1, c >= 2, 1 <= p <= c)")]
    Domain { m: usize, p: usize, c: usize },
    #[error("quota N={quota} exceeds the {m} matrices available")]
    Infeasible { quota: usize, m: usize },
    #[error("request row has length {found}, model has {expected} matrices")]
    RowLength { expected: usize, found: usize },
    #[error("training-example count must be positive")]
    NonPositiveCount,
    #[error("client {client} is missing matrix {index}")]
    MissingContribution { client: usize, index: usize },
    #[error("no response from client {0}")]
    MissingClient(usize),
    #[error("matrix {index}: shape {found:?} differs from {expected:?}")]
    ShapeMismatch {
        index: usize,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("matrix {index}: {reason}")]
    ChunkMismatch { index: usize, reason: String },
    #[error("ciphertext round {found} does not match public key round {expected}")]
    KeyRoundMismatch { expected: u64, found: u64 },
    #[error(transparent)]
    Fhe(#[from] FheError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = SegmentationError> = std::result::Result<T, E>;

fn check_domain(m: usize, p: usize, c: usize) -> Result<()> {
    if m == 0 || c < 2 || p == 0 || p > c {
        return Err(SegmentationError::Domain { m, p, c });
    }
    Ok(())
}

/// Matrices each client must send: `ceil(M·p / c)`.
pub fn compute_quota(m: usize, p: usize, c: usize) -> Result<usize> {
    check_domain(m, p, c)?;
    Ok((m * p).div_ceil(c))
}

/// A `c × M` binary matrix; row `i` lists the matrices client `i` sends.
///
/// Every column sums to at least `p` and every row holds at least the quota.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequestMatrix {
    rows: Vec<Vec<bool>>,
    p: usize,
    quota: usize,
}

impl RequestMatrix {
    /// Greedy min-fill generation.
    ///
    /// The first row gets `N` uniformly random ones. Each later row places
    /// its `N` ones one at a time on a column with the smallest running
    /// column sum, choosing uniformly among ties and skipping columns
    /// already set in that row. A final pass tops up any column still below
    /// `p` using the row with the fewest ones that lacks it.
    pub fn generate<R: Rng + ?Sized>(m: usize, c: usize, p: usize, rng: &mut R) -> Result<Self> {
        let quota = compute_quota(m, p, c)?;
        if quota > m {
            return Err(SegmentationError::Infeasible { quota, m });
        }
        let mut rows = vec![vec![false; m]; c];
        let mut sums = vec![0usize; m];
        for j in index::sample(rng, m, quota) {
            rows[0][j] = true;
            sums[j] += 1;
        }
        let mut tied = Vec::with_capacity(m);
        for row in rows.iter_mut().skip(1) {
            for _ in 0..quota {
                let min = (0..m).filter(|&j| !row[j]).map(|j| sums[j]).min().expect("quota <= M");
                tied.clear();
                tied.extend((0..m).filter(|&j| !row[j] && sums[j] == min));
                let j = tied[rng.random_range(0..tied.len())];
                row[j] = true;
                sums[j] += 1;
            }
        }
        let mut out = Self { rows, p, quota };
        out.repair_coverage();
        Ok(out)
    }

    /// Every client sends every matrix (segmentation off).
    pub fn all_ones(c: usize, m: usize) -> Result<Self> {
        check_domain(m, c, c)?;
        Ok(Self {
            rows: vec![vec![true; m]; c],
            p: c,
            quota: m,
        })
    }

    /// Builds a matrix from explicit rows, validating coverage.
    pub fn from_rows(rows: Vec<Vec<bool>>, p: usize) -> Result<Self> {
        let c = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        let quota = compute_quota(m, p, c)?;
        if let Some(bad) = rows.iter().find(|r| r.len() != m) {
            return Err(SegmentationError::RowLength {
                expected: m,
                found: bad.len(),
            });
        }
        let out = Self { rows, p, quota };
        if let Some(j) = out.column_sums().iter().position(|&s| s < p) {
            return Err(SegmentationError::MissingContribution { client: 0, index: j + 1 });
        }
        Ok(out)
    }

    fn repair_coverage(&mut self) {
        let m = self.matrices();
        for j in 0..m {
            while self.rows.iter().filter(|r| r[j]).count() < self.p {
                let target = (0..self.rows.len())
                    .filter(|&i| !self.rows[i][j])
                    .min_by_key(|&i| self.rows[i].iter().filter(|&&b| b).count())
                    .expect("p <= c leaves a row without column j");
                self.rows[target][j] = true;
            }
        }
    }

    pub fn clients(&self) -> usize {
        self.rows.len()
    }

    pub fn matrices(&self) -> usize {
        self.rows.first().map_or(0, Vec::len)
    }

    pub fn coverage(&self) -> usize {
        self.p
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    /// Row for 1-based client `client`.
    pub fn row(&self, client: usize) -> &[bool] {
        &self.rows[client - 1]
    }

    pub fn rows(&self) -> &[Vec<bool>] {
        &self.rows
    }

    pub fn get(&self, client: usize, index: usize) -> bool {
        self.rows[client - 1][index - 1]
    }

    pub fn column_sums(&self) -> Vec<usize> {
        (0..self.matrices())
            .map(|j| self.rows.iter().filter(|r| r[j]).count())
            .collect()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.iter().filter(|&&b| b).count()).collect()
    }

    /// 1-based ids of the clients that send matrix `index`, ascending.
    pub fn contributors(&self, index: usize) -> Vec<usize> {
        (0..self.clients()).filter(|&i| self.rows[i][index - 1]).map(|i| i + 1).collect()
    }

    /// Packs a row into bytes, least significant bit first.
    pub fn encode_row(row: &[bool]) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + row.len().div_ceil(8));
        out.extend_from_slice(&(row.len() as u32).to_le_bytes());
        let mut packed = vec![0u8; row.len().div_ceil(8)];
        for (j, &bit) in row.iter().enumerate() {
            if bit {
                packed[j / 8] |= 1 << (j % 8);
            }
        }
        out.extend_from_slice(&packed);
        out
    }

    pub fn decode_row(bytes: &[u8]) -> Option<Vec<bool>> {
        let len = u32::from_le_bytes(bytes.get(..4)?.try_into().ok()?) as usize;
        let packed = bytes.get(4..)?;
        if packed.len() != len.div_ceil(8) {
            return None;
        }
        Some((0..len).map(|j| packed[j / 8] & (1 << (j % 8)) != 0).collect())
    }
}

/// The matrices one client forwards, tagged with its training-set size `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientResponse<P> {
    pub client: usize,
    pub selected: Vec<(usize, P)>,
    pub t: u64,
}

/// Selects the matrices marked in `row`.
pub fn build_response(client: usize, model: &ModelParams, row: &[bool], t: u64) -> Result<ClientResponse<ParamMatrix>> {
    if row.len() != model.len() {
        return Err(SegmentationError::RowLength {
            expected: model.len(),
            found: row.len(),
        });
    }
    if t == 0 {
        return Err(SegmentationError::NonPositiveCount);
    }
    let selected = model
        .matrices()
        .iter()
        .zip(row)
        .filter(|(_, &keep)| keep)
        .map(|(m, _)| (m.index(), m.clone()))
        .collect();
    Ok(ClientResponse { client, selected, t })
}

/// Contributions to matrix `index`, in ascending client order.
fn contributions<'a, P>(
    responses: &'a [ClientResponse<P>],
    request: &RequestMatrix,
    index: usize,
) -> Result<Vec<(&'a P, u64)>> {
    request
        .contributors(index)
        .into_iter()
        .map(|client| {
            let resp = responses
                .iter()
                .find(|r| r.client == client)
                .ok_or(SegmentationError::MissingClient(client))?;
            let item = resp
                .selected
                .iter()
                .find(|(j, _)| *j == index)
                .map(|(_, p)| p)
                .ok_or(SegmentationError::MissingContribution { client, index })?;
            Ok((item, resp.t))
        })
        .collect()
}

/// Plaintext weighted average per matrix over exactly the clients the
/// request matrix selected for it:
/// `W_j = (Σ_i t_i·w_ij) · (1 / Σ_i t_i)`, summed in ascending client order.
/// A lone contributor's matrix is copied unchanged.
pub fn aggregate_plain(responses: &[ClientResponse<ParamMatrix>], request: &RequestMatrix) -> Result<ModelParams> {
    let matrices = (1..=request.matrices())
        .map(|j| {
            let parts = contributions(responses, request, j)?;
            let (first, _) = parts[0];
            if parts.len() == 1 {
                return Ok(ParamMatrix::new(j, first.shape().to_vec(), first.values().to_vec(), first.role())?);
            }
            let mut sum = vec![0.0; first.len()];
            let mut weight = 0.0;
            for (w, t) in &parts {
                if w.shape() != first.shape() {
                    return Err(SegmentationError::ShapeMismatch {
                        index: j,
                        expected: first.shape().to_vec(),
                        found: w.shape().to_vec(),
                    });
                }
                let t = *t as f64;
                for (s, v) in sum.iter_mut().zip(w.values()) {
                    *s += v * t;
                }
                weight += t;
            }
            let inv = 1.0 / weight;
            let values = sum.into_iter().map(|s| s * inv).collect();
            Ok(ParamMatrix::new(j, first.shape().to_vec(), values, first.role())?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ModelParams::new(matrices)?)
}

/// Homomorphic counterpart of [`aggregate_plain`]: per matrix and chunk,
/// `Σ_i ct_ij ⊙ t_i` followed by `⊙ (1 / Σ_i t_i)`, consuming two levels.
/// A lone contributor's ciphertexts pass through at their original level.
///
/// Matrices are processed in parallel; each one's reduction order is fixed
/// by ascending client id.
pub fn aggregate_encrypted(
    responses: &[ClientResponse<EncryptedMatrix>],
    request: &RequestMatrix,
    pk: &PublicKey,
    backend: &Backend,
) -> Result<Vec<EncryptedMatrix>> {
    for resp in responses {
        for (_, em) in &resp.selected {
            if let Some(ct) = em.chunks.iter().find(|ct| ct.round() != pk.round()) {
                return Err(SegmentationError::KeyRoundMismatch {
                    expected: pk.round().0,
                    found: ct.round().0,
                });
            }
        }
    }
    (1..=request.matrices())
        .into_par_iter()
        .map(|j| {
            let parts = contributions(responses, request, j)?;
            let (first, _) = parts[0];
            let chunks = first.chunks.len();
            for (em, _) in &parts {
                if em.shape != first.shape {
                    return Err(SegmentationError::ShapeMismatch {
                        index: j,
                        expected: first.shape.clone(),
                        found: em.shape.clone(),
                    });
                }
                if em.chunks.len() != chunks {
                    return Err(SegmentationError::ChunkMismatch {
                        index: j,
                        reason: format!("{} chunks vs {}", em.chunks.len(), chunks),
                    });
                }
            }
            if let [(only, _)] = parts[..] {
                return Ok(only.clone());
            }
            let weight: u64 = parts.iter().map(|(_, t)| t).sum();
            let inv = Plain::Scalar(1.0 / weight as f64);
            let out = (0..chunks)
                .map(|k| {
                    let mut acc = None;
                    for (em, t) in &parts {
                        let term = backend.mul_plain(&em.chunks[k], &Plain::Scalar(*t as f64))?;
                        acc = Some(match acc {
                            None => term,
                            Some(a) => backend.add(&a, &term)?,
                        });
                    }
                    Ok(backend.mul_plain(&acc.expect("at least one contributor"), &inv)?)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(EncryptedMatrix {
                index: j,
                shape: first.shape.clone(),
                role: first.role,
                chunks: out,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Role;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn scalar(index: usize, v: f64) -> ParamMatrix {
        ParamMatrix::new(index, vec![1], vec![v], Role::Weight).unwrap()
    }

    #[test]
    fn quota_examples() {
        assert_eq!(compute_quota(10, 5, 10).unwrap(), 5);
        assert_eq!(compute_quota(10, 1, 2).unwrap(), 5);
        assert_eq!(compute_quota(128, 3, 10).unwrap(), 39);
    }

    #[test]
    fn quota_rejects_bad_domains() {
        assert!(compute_quota(0, 1, 2).is_err());
        assert!(compute_quota(4, 0, 2).is_err());
        assert!(compute_quota(4, 3, 2).is_err());
        assert!(compute_quota(4, 1, 1).is_err());
    }

    #[test]
    fn full_coverage_gives_all_ones() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let r = RequestMatrix::generate(10, 10, 10, &mut rng).unwrap();
        assert!(r.rows().iter().all(|row| row.iter().all(|&b| b)));
    }

    #[test]
    fn exact_fill_when_ones_match_demand() {
        for seed in 0..1000 {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let r = RequestMatrix::generate(10, 10, 5, &mut rng).unwrap();
            assert!(r.column_sums().iter().all(|&s| s == 5), "seed {seed}");
            assert!(r.row_sums().iter().all(|&s| s == 5));
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let a = RequestMatrix::generate(12, 5, 2, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        let b = RequestMatrix::generate(12, 5, 2, &mut ChaCha20Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn row_bits_roundtrip() {
        let row = vec![true, false, true, true, false, false, false, false, true];
        let bytes = RequestMatrix::encode_row(&row);
        assert_eq!(RequestMatrix::decode_row(&bytes).unwrap(), row);
        assert!(RequestMatrix::decode_row(&bytes[..bytes.len() - 1]).is_none());
    }

    #[test]
    fn build_response_selects_marked_matrices() {
        let model = ModelParams::new(vec![scalar(1, 1.0), scalar(2, 2.0), scalar(3, 3.0)]).unwrap();
        let resp = build_response(1, &model, &[true, false, true], 7).unwrap();
        let idx: Vec<usize> = resp.selected.iter().map(|(j, _)| *j).collect();
        assert_eq!(idx, vec![1, 3]);
        assert_eq!(resp.t, 7);
        assert!(build_response(1, &model, &[false; 3], 7).unwrap().selected.is_empty());
        assert_eq!(build_response(1, &model, &[true; 3], 1).unwrap().selected.len(), 3);
        assert_eq!(
            build_response(1, &model, &[true; 2], 1).unwrap_err(),
            SegmentationError::RowLength { expected: 3, found: 2 }
        );
        assert_eq!(build_response(1, &model, &[true; 3], 0).unwrap_err(), SegmentationError::NonPositiveCount);
    }

    #[test]
    fn weighted_mean_of_two() {
        let r = RequestMatrix::from_rows(vec![vec![true], vec![true]], 2).unwrap();
        let responses = vec![
            ClientResponse { client: 1, selected: vec![(1, scalar(1, 2.0))], t: 3 },
            ClientResponse { client: 2, selected: vec![(1, scalar(1, 4.0))], t: 1 },
        ];
        let w = aggregate_plain(&responses, &r).unwrap();
        assert_eq!(w.get(1).unwrap().values(), &[2.5]);
    }

    #[test]
    fn unselected_client_is_ignored() {
        let r = RequestMatrix::from_rows(vec![vec![true], vec![false], vec![true]], 2).unwrap();
        let responses = vec![
            ClientResponse { client: 1, selected: vec![(1, scalar(1, 1.0))], t: 1 },
            ClientResponse { client: 2, selected: vec![(1, scalar(1, 100.0))], t: 50 },
            ClientResponse { client: 3, selected: vec![(1, scalar(1, 5.0))], t: 3 },
        ];
        // brute force: (1*1 + 5*3) / (1 + 3)
        let expected = (1.0 * 1.0 + 5.0 * 3.0) / 4.0;
        let w = aggregate_plain(&responses, &r).unwrap();
        assert_eq!(w.get(1).unwrap().values(), &[expected]);
        assert_eq!(expected, 4.0);
    }

    #[test]
    fn missing_contribution_is_an_error() {
        let r = RequestMatrix::from_rows(vec![vec![true, true], vec![true, true]], 2).unwrap();
        let responses = vec![
            ClientResponse { client: 1, selected: vec![(1, scalar(1, 1.0)), (2, scalar(2, 1.0))], t: 1 },
            ClientResponse { client: 2, selected: vec![(1, scalar(1, 1.0))], t: 1 },
        ];
        assert_eq!(
            aggregate_plain(&responses, &r).unwrap_err(),
            SegmentationError::MissingContribution { client: 2, index: 2 }
        );
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let r = RequestMatrix::from_rows(vec![vec![true], vec![true]], 2).unwrap();
        let wide = ParamMatrix::new(1, vec![2], vec![1.0, 2.0], Role::Weight).unwrap();
        let responses = vec![
            ClientResponse { client: 1, selected: vec![(1, scalar(1, 1.0))], t: 1 },
            ClientResponse { client: 2, selected: vec![(1, wide)], t: 1 },
        ];
        assert!(matches!(aggregate_plain(&responses, &r), Err(SegmentationError::ShapeMismatch { .. })));
    }
}
