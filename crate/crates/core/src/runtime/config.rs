//! Federation settings, loadable from TOML.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::DEFAULT_FRAME_CAP;
use crate::fhe::{FheParams, SchemeTag, SecurityNote};
use crate::training::{Activation, SgdConfig};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid `{field}`: {reason}")]
pub struct ConfigError {
    pub field: &'static str,
    pub reason: String,
}

impl ConfigError {
    pub fn new(field: &'static str, reason: impl Into<String>) -> Self {
        Self {
            field,
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FheMode {
    Off,
    Oracle,
    Ckks,
}

/// Ring parameters used when encryption is on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FheSettings {
    pub ring_dim: usize,
    pub scale_bits: u16,
    pub modulus_chain_bits: Vec<u32>,
    #[serde(default = "test_security")]
    pub security: SecurityNote,
}

fn test_security() -> SecurityNote {
    SecurityNote::Test
}

impl Default for FheSettings {
    fn default() -> Self {
        let p = FheParams::test();
        Self {
            ring_dim: p.ring_dim,
            scale_bits: p.scale_bits,
            modulus_chain_bits: p.modulus_chain_bits,
            security: p.security,
        }
    }
}

impl FheSettings {
    pub fn params(&self, scheme: SchemeTag) -> FheParams {
        FheParams {
            scheme,
            ring_dim: self.ring_dim,
            scale_bits: self.scale_bits,
            modulus_chain_bits: self.modulus_chain_bits.clone(),
            security: self.security,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetConfig {
    /// Gaussian clusters, one per class.
    Blobs {
        samples: usize,
        classes: usize,
        features: usize,
        spread: f64,
    },
    /// 8×8 synthetic digit glyphs.
    Digits { samples: usize, noise: f64 },
    /// IDX image and label files.
    Idx {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        limit: Option<usize>,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Blobs {
            samples: 2000,
            classes: 10,
            features: 16,
            spread: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TransportConfig {
    #[default]
    InProcess,
    /// Loopback TCP through a listener bound at `address`.
    Socket { address: String },
}

/// Everything needed to run an experiment. Field names double as the TOML
/// keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationConfig {
    /// Total clients `C`.
    pub clients: usize,
    /// Clients selected per round `c`.
    pub selected: usize,
    /// Minimum contributions per matrix `p`; defaults to `⌈c/2⌉`.
    pub coverage: Option<usize>,
    pub rounds: usize,
    pub fhe: FheMode,
    pub fhe_params: FheSettings,
    pub segmentation: bool,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
    pub dataset: DatasetConfig,
    /// Share of each client's partition held out for evaluation.
    pub test_fraction: f64,
    pub transport: TransportConfig,
    pub frame_cap: usize,
    /// Receive timeout for the socket transport; `None` waits forever.
    pub timeout_ms: Option<u64>,
    /// Reports zero for every wall-time column.
    pub deterministic: bool,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            clients: 10,
            selected: 10,
            coverage: None,
            rounds: 20,
            fhe: FheMode::Ckks,
            fhe_params: FheSettings::default(),
            segmentation: true,
            epochs: 2,
            learning_rate: 0.3,
            batch_size: 16,
            hidden: vec![32],
            activation: Activation::Relu,
            seed: 0,
            dataset: DatasetConfig::default(),
            test_fraction: 0.2,
            transport: TransportConfig::InProcess,
            frame_cap: DEFAULT_FRAME_CAP,
            timeout_ms: None,
            deterministic: false,
        }
    }
}

impl FederationConfig {
    /// `p` actually used: `c` when segmentation is off.
    pub fn effective_coverage(&self) -> usize {
        if self.segmentation {
            self.coverage.unwrap_or(self.selected.div_ceil(2))
        } else {
            self.selected
        }
    }

    pub fn scheme(&self) -> Option<SchemeTag> {
        match self.fhe {
            FheMode::Off => None,
            FheMode::Oracle => Some(SchemeTag::Oracle),
            FheMode::Ckks => Some(SchemeTag::Ckks),
        }
    }

    pub fn fhe_params(&self) -> Option<FheParams> {
        self.scheme().map(|s| self.fhe_params.params(s))
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.selected < 2 || self.selected > self.clients {
            return Err(ConfigError::new(
                "selected",
                format!("need 2 <= c <= C, got c = {} and C = {}", self.selected, self.clients),
            ));
        }
        if let Some(p) = self.coverage {
            if p == 0 || p > self.selected {
                return Err(ConfigError::new("coverage", format!("need 1 <= p <= c = {}, got {p}", self.selected)));
            }
        }
        if self.rounds == 0 {
            return Err(ConfigError::new("rounds", "must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ConfigError::new("learning_rate", "must be positive and finite"));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::new("batch_size", "must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(ConfigError::new("hidden", "widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return Err(ConfigError::new("test_fraction", "must lie in [0, 1)"));
        }
        if self.frame_cap < 64 {
            return Err(ConfigError::new("frame_cap", "must be at least 64 bytes"));
        }
        if let Some(params) = self.fhe_params() {
            params.validate().map_err(|e| ConfigError::new("fhe_params", e.to_string()))?;
        }
        let samples = match &self.dataset {
            DatasetConfig::Blobs {
                samples,
                classes,
                features,
                spread,
            } => {
                if *classes < 2 || *features == 0 {
                    return Err(ConfigError::new("dataset", "blobs need >= 2 classes and >= 1 feature"));
                }
                if !(spread.is_finite() && *spread >= 0.0) {
                    return Err(ConfigError::new("dataset", "spread must be finite and nonnegative"));
                }
                Some(*samples)
            }
            DatasetConfig::Digits { samples, noise } => {
                if !(noise.is_finite() && *noise >= 0.0) {
                    return Err(ConfigError::new("dataset", "noise must be finite and nonnegative"));
                }
                Some(*samples)
            }
            DatasetConfig::Idx { limit, .. } => *limit,
        };
        if let Some(n) = samples {
            if n < 2 * self.clients {
                return Err(ConfigError::new(
                    "dataset",
                    format!("{n} samples cannot give {} clients a train and test split", self.clients),
                ));
            }
        }
        Ok(())
    }
}
