//! Exact reference backend: ciphertexts carry their slots in the clear.

use super::{Ciphertext, FheError, FheParams, Payload, Plain, Result};

#[derive(Debug, Clone)]
pub struct OracleBackend {
    params: FheParams,
}

impl OracleBackend {
    pub fn new(params: FheParams) -> Self {
        Self { params }
    }

    pub fn params(&self) -> &FheParams {
        &self.params
    }

    pub(crate) fn encrypt(&self, values: &[f64]) -> Payload {
        let mut slots = vec![0.0; self.params.slot_capacity()];
        slots[..values.len()].copy_from_slice(values);
        Payload::Slots(slots)
    }

    pub(crate) fn decrypt(&self, ct: &Ciphertext) -> Result<Vec<f64>> {
        Ok(self.slots(ct)?.to_vec())
    }

    pub(crate) fn add(&self, a: &Ciphertext, b: &Ciphertext) -> Result<Payload> {
        let (x, y) = (self.slots(a)?, self.slots(b)?);
        Ok(Payload::Slots(x.iter().zip(y).map(|(u, v)| u + v).collect()))
    }

    pub(crate) fn mul_plain(&self, ct: &Ciphertext, plain: &Plain) -> Result<Payload> {
        let x = self.slots(ct)?;
        let out = match plain {
            Plain::Scalar(s) => x.iter().map(|v| v * s).collect(),
            Plain::Vector(p) => x
                .iter()
                .enumerate()
                .map(|(k, v)| v * p.get(k).copied().unwrap_or(0.0))
                .collect(),
        };
        Ok(Payload::Slots(out))
    }

    fn slots<'a>(&self, ct: &'a Ciphertext) -> Result<&'a [f64]> {
        match &ct.payload {
            Payload::Slots(s) if s.len() == self.params.slot_capacity() => Ok(s),
            Payload::Slots(s) => Err(FheError::BadPayload(format!(
                "{} slots, expected {}",
                s.len(),
                self.params.slot_capacity()
            ))),
            Payload::Rns { .. } => Err(FheError::BadPayload("expected a slot payload".into())),
        }
    }
}
