//! Leveled approximate-arithmetic RLWE backend over an RNS modulus chain.
//!
//! Ciphertexts are pairs `(c0, c1)` with `c0 + c1·s ≈ Δ·m` modulo the
//! product of the active data primes. Plaintext multiplication encodes the
//! multiplier at a scale equal to the prime about to be dropped, so the
//! rescale that follows restores the ciphertext scale to exactly `Δ`.
//!
//! The final prime of the chain is reserved for key switching. Nothing here
//! needs key switching (no ciphertext products, no rotations), so it is
//! generated but never used for data.

pub mod encoding;
pub mod ntt;

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use self::encoding::SlotEncoder;
use self::ntt::{add_mod, center, inv_mod, mul_mod, ntt_primes, reduce_i128, sub_mod, NttTable};
use super::{Ciphertext, FheError, FheParams, Payload, Plain, Result};

/// Standard deviation of the discrete Gaussian error.
pub const ERROR_STD_DEV: f64 = 3.2;
const ERROR_TAIL: f64 = 6.0 * ERROR_STD_DEV;

type Limbs<'a> = &'a [Vec<u64>];

#[derive(Debug, Clone, PartialEq)]
pub struct CkksPublicKey {
    /// `b = -a·s + e`, NTT form, one limb per data prime.
    pub(crate) b: Vec<Vec<u64>>,
    /// Uniform `a`, NTT form.
    pub(crate) a: Vec<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CkksSecretKey {
    /// Ternary coefficients of `s`.
    pub(crate) coeffs: Vec<i8>,
}

#[derive(Debug)]
struct Context {
    ring_dim: usize,
    /// Data primes, base prime first.
    primes: Vec<u64>,
    special_prime: u64,
    tables: Vec<NttTable>,
    encoder: SlotEncoder,
    /// `garner[k][j] = prod_{i<j} q_i mod q_k` for `j <= k`.
    garner_prod: Vec<Vec<u64>>,
    /// `(prod_{i<k} q_i)^-1 mod q_k`.
    garner_inv: Vec<u64>,
}

#[derive(Debug, Clone)]
pub struct CkksBackend {
    params: FheParams,
    ctx: Arc<Context>,
}

impl CkksBackend {
    pub fn new(params: FheParams) -> Result<Self> {
        let n = params.ring_dim;
        let chain = ntt_primes(&params.modulus_chain_bits, n).ok_or_else(|| {
            FheError::UnsupportedParams(format!(
                "no NTT-friendly primes for chain {:?} at ring dimension {n}",
                params.modulus_chain_bits
            ))
        })?;
        let (special_prime, primes) = chain.split_last().map(|(s, d)| (*s, d.to_vec())).unwrap();
        let tables = primes.iter().map(|&q| NttTable::new(q, n)).collect();
        let mut garner_prod = Vec::with_capacity(primes.len());
        let mut garner_inv = Vec::with_capacity(primes.len());
        for (k, &qk) in primes.iter().enumerate() {
            let mut row = Vec::with_capacity(k + 1);
            let mut acc = 1u64;
            for &qi in &primes[..k] {
                row.push(acc);
                acc = mul_mod(acc, qi % qk, qk);
            }
            row.push(acc);
            garner_inv.push(if k == 0 { 1 } else { inv_mod(acc, qk) });
            garner_prod.push(row);
        }
        Ok(Self {
            params,
            ctx: Arc::new(Context {
                ring_dim: n,
                primes,
                special_prime,
                tables,
                encoder: SlotEncoder::new(n),
                garner_prod,
                garner_inv,
            }),
        })
    }

    pub fn params(&self) -> &FheParams {
        &self.params
    }

    /// Data primes followed by the special prime.
    pub fn modulus_chain(&self) -> Vec<u64> {
        let mut out = self.ctx.primes.clone();
        out.push(self.ctx.special_prime);
        out
    }

    pub(crate) fn keygen<R: Rng + ?Sized>(&self, rng: &mut R) -> (CkksPublicKey, CkksSecretKey) {
        let ctx = &self.ctx;
        let n = ctx.ring_dim;
        let s = sample_ternary(rng, n);
        let e = sample_gaussian(rng, n);
        let mut b = Vec::with_capacity(ctx.primes.len());
        let mut a = Vec::with_capacity(ctx.primes.len());
        for (table, &q) in ctx.tables.iter().zip(&ctx.primes) {
            let a_ntt: Vec<u64> = (0..n).map(|_| rng.random_range(0..q)).collect();
            let mut s_ntt = lift_small(&s, q);
            table.forward(&mut s_ntt);
            let mut e_ntt = lift_i64(&e, q);
            table.forward(&mut e_ntt);
            let b_ntt = (0..n)
                .map(|k| sub_mod(e_ntt[k], mul_mod(a_ntt[k], s_ntt[k], q), q))
                .collect();
            a.push(a_ntt);
            b.push(b_ntt);
        }
        (CkksPublicKey { b, a }, CkksSecretKey { coeffs: s })
    }

    pub(crate) fn encrypt<R: Rng + ?Sized>(&self, pk: &CkksPublicKey, values: &[f64], rng: &mut R) -> Payload {
        let ctx = &self.ctx;
        let n = ctx.ring_dim;
        let m = ctx.encoder.encode(values, self.params.scale());
        let u = sample_ternary(rng, n);
        let e0 = sample_gaussian(rng, n);
        let e1 = sample_gaussian(rng, n);
        let mut c0 = Vec::with_capacity(ctx.primes.len());
        let mut c1 = Vec::with_capacity(ctx.primes.len());
        for (i, (table, &q)) in ctx.tables.iter().zip(&ctx.primes).enumerate() {
            let mut u_ntt = lift_small(&u, q);
            table.forward(&mut u_ntt);
            let mut x0: Vec<u64> = (0..n).map(|k| mul_mod(u_ntt[k], pk.b[i][k], q)).collect();
            let mut x1: Vec<u64> = (0..n).map(|k| mul_mod(u_ntt[k], pk.a[i][k], q)).collect();
            table.inverse(&mut x0);
            table.inverse(&mut x1);
            for k in 0..n {
                x0[k] = add_mod(x0[k], reduce_i128(m[k] + e0[k] as i128, q), q);
                x1[k] = add_mod(x1[k], reduce_i128(e1[k] as i128, q), q);
            }
            c0.push(x0);
            c1.push(x1);
        }
        Payload::Rns { c0, c1 }
    }

    pub(crate) fn decrypt(&self, sk: &CkksSecretKey, ct: &Ciphertext) -> Result<Vec<f64>> {
        let (c0, c1) = self.limbs(ct)?;
        let ctx = &self.ctx;
        let n = ctx.ring_dim;
        if sk.coeffs.len() != n {
            return Err(FheError::BadPayload("secret key ring dimension mismatch".into()));
        }
        let mut residues = Vec::with_capacity(c0.len());
        for (i, table) in ctx.tables.iter().take(c0.len()).enumerate() {
            let q = table.modulus();
            let mut s_ntt = lift_small(&sk.coeffs, q);
            table.forward(&mut s_ntt);
            let mut prod = c1[i].clone();
            table.forward(&mut prod);
            for k in 0..n {
                prod[k] = mul_mod(prod[k], s_ntt[k], q);
            }
            table.inverse(&mut prod);
            for k in 0..n {
                prod[k] = add_mod(prod[k], c0[i][k], q);
            }
            residues.push(prod);
        }
        let coeffs: Vec<f64> = (0..n)
            .map(|k| self.centered_value(&residues, k))
            .collect();
        let scale = 2f64.powi(ct.scale_bits as i32);
        Ok(ctx.encoder.decode(&coeffs, scale))
    }

    pub(crate) fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Payload> {
        let (a0, a1) = self.limbs(a)?;
        let (b0, b1) = self.limbs(b)?;
        let primes = &self.ctx.primes;
        let sum = |x: &[Vec<u64>], y: &[Vec<u64>]| -> Vec<Vec<u64>> {
            x.iter()
                .zip(y)
                .zip(primes)
                .map(|((xl, yl), &q)| xl.iter().zip(yl).map(|(&u, &v)| add_mod(u, v, q)).collect())
                .collect()
        };
        Ok(Payload::Rns {
            c0: sum(a0, b0),
            c1: sum(a1, b1),
        })
    }

    pub(crate) fn mul_plain(&self, ct: &Ciphertext, plain: &Plain) -> Result<Payload> {
        let (c0, c1) = self.limbs(ct)?;
        let ctx = &self.ctx;
        let n = ctx.ring_dim;
        let top = c0.len() - 1;
        let plain_scale = ctx.primes[top] as f64;
        let (mut d0, mut d1) = (c0.to_vec(), c1.to_vec());
        match plain {
            Plain::Scalar(s) => {
                let c = (s * plain_scale).round() as i128;
                for (i, &q) in ctx.primes[..=top].iter().enumerate() {
                    let r = reduce_i128(c, q);
                    for k in 0..n {
                        d0[i][k] = mul_mod(d0[i][k], r, q);
                        d1[i][k] = mul_mod(d1[i][k], r, q);
                    }
                }
            }
            Plain::Vector(v) => {
                let p = ctx.encoder.encode(v, plain_scale);
                for (i, table) in ctx.tables[..=top].iter().enumerate() {
                    let q = table.modulus();
                    let mut p_ntt: Vec<u64> = p.iter().map(|&x| reduce_i128(x, q)).collect();
                    table.forward(&mut p_ntt);
                    for d in [&mut d0[i], &mut d1[i]] {
                        table.forward(d);
                        for k in 0..n {
                            d[k] = mul_mod(d[k], p_ntt[k], q);
                        }
                        table.inverse(d);
                    }
                }
            }
        }
        self.rescale(&mut d0);
        self.rescale(&mut d1);
        Ok(Payload::Rns { c0: d0, c1: d1 })
    }

    /// Divides by the last active prime (rounding) and drops its limb.
    fn rescale(&self, limbs: &mut Vec<Vec<u64>>) {
        let last = limbs.pop().expect("at least two limbs");
        let q_last = self.ctx.primes[limbs.len()];
        for (i, limb) in limbs.iter_mut().enumerate() {
            let q = self.ctx.primes[i];
            let inv = inv_mod(q_last % q, q);
            for (x, &l) in limb.iter_mut().zip(&last) {
                let lifted = reduce_i128(center(l, q_last) as i128, q);
                *x = mul_mod(sub_mod(*x, lifted, q), inv, q);
            }
        }
    }

    /// Centered CRT lift of coefficient `k` via mixed-radix digits, evaluated
    /// in floating point. Exact whenever the value is small relative to the
    /// base prime, which holds for every decryptable ciphertext.
    fn centered_value(&self, residues: &[Vec<u64>], k: usize) -> f64 {
        let ctx = &self.ctx;
        let mut digits: Vec<i64> = Vec::with_capacity(residues.len());
        for (j, limb) in residues.iter().enumerate() {
            let q = ctx.primes[j];
            let mut acc = 0u64;
            for (d, &prod) in digits.iter().zip(&ctx.garner_prod[j]) {
                acc = add_mod(acc, mul_mod(reduce_i128(*d as i128, q), prod, q), q);
            }
            let digit = mul_mod(sub_mod(limb[k], acc, q), ctx.garner_inv[j], q);
            digits.push(center(digit, q));
        }
        let mut value = 0.0;
        for (j, d) in digits.iter().enumerate().rev() {
            value = value * ctx.primes[j] as f64 + *d as f64;
        }
        value
    }

    fn limbs<'a>(&self, ct: &'a Ciphertext) -> Result<(Limbs<'a>, Limbs<'a>)> {
        let Payload::Rns { c0, c1 } = &ct.payload else {
            return Err(FheError::BadPayload("expected an RNS payload".into()));
        };
        let limbs = ct.level as usize + 1;
        if c0.len() != limbs || c1.len() != limbs || limbs > self.ctx.primes.len() {
            return Err(FheError::BadPayload(format!(
                "level {} needs {limbs} limbs, payload has {}/{}",
                ct.level,
                c0.len(),
                c1.len()
            )));
        }
        let n = self.ctx.ring_dim;
        for (i, (l0, l1)) in c0.iter().zip(c1).enumerate() {
            let q = self.ctx.primes[i];
            if l0.len() != n || l1.len() != n {
                return Err(FheError::BadPayload(format!("limb {i} is not {n} coefficients long")));
            }
            if l0.iter().chain(l1).any(|&x| x >= q) {
                return Err(FheError::BadPayload(format!("limb {i} holds unreduced residues")));
            }
        }
        Ok((c0, c1))
    }
}

fn sample_ternary<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<i8> {
    (0..n).map(|_| rng.random_range(-1i8..=1)).collect()
}

fn sample_gaussian<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<i64> {
    let normal = Normal::new(0.0, ERROR_STD_DEV).expect("positive std dev");
    (0..n)
        .map(|_| normal.sample(rng).clamp(-ERROR_TAIL, ERROR_TAIL).round() as i64)
        .collect()
}

fn lift_small(coeffs: &[i8], q: u64) -> Vec<u64> {
    coeffs.iter().map(|&c| reduce_i128(c as i128, q)).collect()
}

fn lift_i64(coeffs: &[i64], q: u64) -> Vec<u64> {
    coeffs.iter().map(|&c| reduce_i128(c as i128, q)).collect()
}
