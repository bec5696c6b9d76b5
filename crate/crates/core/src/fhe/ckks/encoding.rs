//! Packing real vectors into ring elements through the canonical embedding.
//!
//! A plaintext polynomial `m(X)` of degree `< N` decodes to the slot vector
//! `z_j = m(ζ^{5^j}) / Δ` for `j < N/2`, where `ζ = exp(iπ/N)`. Both
//! directions run in `O(N log N)` using the rotation-group ordered FFT.

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Complex {
    re: f64,
    im: f64,
}

impl Complex {
    const ZERO: Complex = Complex { re: 0.0, im: 0.0 };

    fn add(self, o: Complex) -> Complex {
        Complex {
            re: self.re + o.re,
            im: self.im + o.im,
        }
    }

    fn sub(self, o: Complex) -> Complex {
        Complex {
            re: self.re - o.re,
            im: self.im - o.im,
        }
    }

    fn mul(self, o: Complex) -> Complex {
        Complex {
            re: self.re * o.re - self.im * o.im,
            im: self.re * o.im + self.im * o.re,
        }
    }
}

/// Precomputed roots and rotation group for ring dimension `N`.
#[derive(Debug, Clone)]
pub struct SlotEncoder {
    ring_dim: usize,
    rot_group: Vec<usize>,
    ksi: Vec<Complex>,
}

impl SlotEncoder {
    pub fn new(ring_dim: usize) -> Self {
        assert!(ring_dim.is_power_of_two() && ring_dim >= 4);
        let m = 2 * ring_dim;
        let slots = ring_dim / 2;
        let mut rot_group = Vec::with_capacity(slots);
        let mut five_pow = 1usize;
        for _ in 0..slots {
            rot_group.push(five_pow);
            five_pow = five_pow * 5 % m;
        }
        let ksi = (0..=m)
            .map(|k| {
                let angle = 2.0 * PI * k as f64 / m as f64;
                Complex {
                    re: angle.cos(),
                    im: angle.sin(),
                }
            })
            .collect();
        Self {
            ring_dim,
            rot_group,
            ksi,
        }
    }

    pub fn slots(&self) -> usize {
        self.ring_dim / 2
    }

    pub fn ring_dim(&self) -> usize {
        self.ring_dim
    }

    /// Encodes up to `N/2` real values at the given scale into integer
    /// coefficients. Missing slots are zero.
    pub fn encode(&self, values: &[f64], scale: f64) -> Vec<i128> {
        let slots = self.slots();
        assert!(values.len() <= slots, "too many values for slot count");
        let mut vals = vec![Complex::ZERO; slots];
        for (v, &x) in vals.iter_mut().zip(values) {
            v.re = x;
        }
        self.fft_special_inv(&mut vals);
        let mut coeffs = vec![0i128; self.ring_dim];
        for (i, v) in vals.iter().enumerate() {
            coeffs[i] = (v.re * scale).round() as i128;
            coeffs[i + slots] = (v.im * scale).round() as i128;
        }
        coeffs
    }

    /// Encodes a constant: every slot holds `value`, which is the constant
    /// polynomial `round(value * scale)`.
    pub fn encode_constant(&self, value: f64, scale: f64) -> Vec<i128> {
        let mut coeffs = vec![0i128; self.ring_dim];
        coeffs[0] = (value * scale).round() as i128;
        coeffs
    }

    /// Decodes centered coefficients back to the real parts of the slots.
    pub fn decode(&self, coeffs: &[f64], scale: f64) -> Vec<f64> {
        let slots = self.slots();
        assert_eq!(coeffs.len(), self.ring_dim);
        let mut vals: Vec<Complex> = (0..slots)
            .map(|i| Complex {
                re: coeffs[i] / scale,
                im: coeffs[i + slots] / scale,
            })
            .collect();
        self.fft_special(&mut vals);
        vals.into_iter().map(|c| c.re).collect()
    }

    fn fft_special(&self, vals: &mut [Complex]) {
        let size = vals.len();
        let m = 2 * self.ring_dim;
        bit_reverse_permute(vals);
        let mut len = 2;
        while len <= size {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (self.rot_group[j] % lenq) * (m / lenq);
                    let u = vals[i + j];
                    let v = vals[i + j + lenh].mul(self.ksi[idx]);
                    vals[i + j] = u.add(v);
                    vals[i + j + lenh] = u.sub(v);
                }
            }
            len <<= 1;
        }
    }

    fn fft_special_inv(&self, vals: &mut [Complex]) {
        let size = vals.len();
        let m = 2 * self.ring_dim;
        let mut len = size;
        while len >= 2 {
            let lenh = len >> 1;
            let lenq = len << 2;
            for i in (0..size).step_by(len) {
                for j in 0..lenh {
                    let idx = (lenq - (self.rot_group[j] % lenq)) * (m / lenq);
                    let u = vals[i + j].add(vals[i + j + lenh]);
                    let v = vals[i + j].sub(vals[i + j + lenh]).mul(self.ksi[idx]);
                    vals[i + j] = u;
                    vals[i + j + lenh] = v;
                }
            }
            len >>= 1;
        }
        bit_reverse_permute(vals);
        let inv = 1.0 / size as f64;
        for v in vals.iter_mut() {
            v.re *= inv;
            v.im *= inv;
        }
    }
}

fn bit_reverse_permute(vals: &mut [Complex]) {
    let n = vals.len();
    let mut j = 0;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j ^= bit;
        if i < j {
            vals.swap(i, j);
        }
    }
}
