//! Gradient-subset leakage analysis: per-layer sensitivity, layer masking,
//! closed-form first-layer input recovery and image-quality metrics.

use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelParams, ParamMatrix, Role};
use crate::training::{self, synthetic_digits, Activation, Dataset, MlpSpec, TrainingError};

/// Smallest bias gradient magnitude accepted as a recovery pivot.
pub const EPS_DIV: f64 = 1e-8;
/// PSNR reported when the images are (numerically) identical.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error("gradient matrices do not pair into (weight, bias) layers: {0}")]
    Grouping(String),
    #[error("non-finite gradient entry in layer {0}")]
    NonFinite(usize),
    #[error("layer {layer} does not exist (model has {layers})")]
    UnknownLayer { layer: usize, layers: usize },
    #[error("subset size {n} out of range 0..={layers}")]
    SubsetSize { n: usize, layers: usize },
    #[error("the first layer is not part of the gradient")]
    FirstLayerMissing,
    #[error("every first-layer bias gradient is below the pivot threshold")]
    AllBiasZero,
    #[error("image shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("invalid attack configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AttackError> = std::result::Result<T, E>;

/// Gradient of one layer: its weight and bias matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    pub layer: usize,
    pub weight: ParamMatrix,
    pub bias: ParamMatrix,
}

/// Per-layer gradients of a model, possibly restricted to a subset of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    groups: Vec<LayerGroup>,
    total_layers: usize,
}

impl LayerGradient {
    /// Pairs matrices `(2l-1, 2l)` into layer `l`.
    pub fn from_model(grads: &ModelParams) -> Result<Self> {
        let mats = grads.matrices();
        if !mats.len().is_multiple_of(2) {
            return Err(AttackError::Grouping(format!("{} matrices", mats.len())));
        }
        let groups = mats
            .chunks(2)
            .enumerate()
            .map(|(k, pair)| {
                let (w, b) = (&pair[0], &pair[1]);
                if w.role() != Role::Weight || b.role() != Role::Bias || w.shape().first() != b.shape().first() {
                    return Err(AttackError::Grouping(format!("matrices {} and {}", w.index(), b.index())));
                }
                Ok(LayerGroup {
                    layer: k + 1,
                    weight: w.clone(),
                    bias: b.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let total_layers = groups.len();
        Ok(Self { groups, total_layers })
    }

    pub fn groups(&self) -> &[LayerGroup] {
        &self.groups
    }

    pub fn group(&self, layer: usize) -> Option<&LayerGroup> {
        self.groups.iter().find(|g| g.layer == layer)
    }

    /// Layers of the full model, `N`.
    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    pub fn included(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.layer).collect()
    }
}

/// Which layers a client shares.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GradientMask {
    included: BTreeSet<usize>,
    total: usize,
}

impl GradientMask {
    pub fn new(included: impl IntoIterator<Item = usize>, total: usize) -> Result<Self> {
        let included: BTreeSet<usize> = included.into_iter().collect();
        if let Some(&layer) = included.iter().find(|&&l| l == 0 || l > total) {
            return Err(AttackError::UnknownLayer { layer, layers: total });
        }
        Ok(Self { included, total })
    }

    pub fn full(total: usize) -> Self {
        Self {
            included: (1..=total).collect(),
            total,
        }
    }

    pub fn empty(total: usize) -> Self {
        Self {
            included: BTreeSet::new(),
            total,
        }
    }

    /// Uniformly random `n`-subset of the `total` layers.
    pub fn random<R: Rng + ?Sized>(n: usize, total: usize, rng: &mut R) -> Result<Self> {
        if n > total {
            return Err(AttackError::SubsetSize { n, layers: total });
        }
        Ok(Self {
            included: sample(rng, total, n).into_iter().map(|k| k + 1).collect(),
            total,
        })
    }

    pub fn n(&self) -> usize {
        self.included.len()
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn ratio(&self) -> f64 {
        self.n() as f64 / self.total as f64
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.included.contains(&layer)
    }
}

/// Per-layer scores `x_i`: mean absolute gradient entry over the layer's
/// weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityReport {
    pub scores: Vec<f64>,
}

impl SensitivityReport {
    /// `S`.
    pub fn total(&self) -> f64 {
        self.scores.iter().sum()
    }

    /// `S′` for the layers in `mask`.
    pub fn subset_total(&self, mask: &GradientMask) -> f64 {
        mask.included.iter().map(|&l| self.scores[l - 1]).sum()
    }

    pub fn layers(&self) -> usize {
        self.scores.len()
    }
}

pub fn layer_sensitivity(grad: &LayerGradient) -> Result<SensitivityReport> {
    let scores = grad
        .groups
        .iter()
        .map(|g| {
            let entries = g.weight.values().iter().chain(g.bias.values());
            let mut sum = 0.0;
            for v in entries {
                if !v.is_finite() {
                    return Err(AttackError::NonFinite(g.layer));
                }
                sum += v.abs();
            }
            Ok(sum / (g.weight.len() + g.bias.len()) as f64)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SensitivityReport { scores })
}

/// Monte-Carlo mean of `S′` over uniformly random `n`-subsets.
pub fn expected_subset_sensitivity<R: Rng + ?Sized>(
    report: &SensitivityReport,
    n: usize,
    trials: usize,
    rng: &mut R,
) -> Result<f64> {
    let layers = report.layers();
    if n > layers {
        return Err(AttackError::SubsetSize { n, layers });
    }
    if trials == 0 {
        return Err(AttackError::Config("trials must be positive".into()));
    }
    let mut acc = 0.0;
    for _ in 0..trials {
        acc += report.subset_total(&GradientMask::random(n, layers, rng)?);
    }
    Ok(acc / trials as f64)
}

/// Keeps only the masked layers; surviving matrices are untouched copies.
pub fn mask_gradient(grad: &LayerGradient, mask: &GradientMask) -> Result<LayerGradient> {
    if mask.total != grad.total_layers {
        return Err(AttackError::Grouping(format!(
            "mask covers {} layers, gradient has {}",
            mask.total, grad.total_layers
        )));
    }
    if let Some(&layer) = mask.included.iter().find(|&&l| grad.group(l).is_none()) {
        return Err(AttackError::UnknownLayer {
            layer,
            layers: grad.total_layers,
        });
    }
    Ok(LayerGradient {
        groups: grad.groups.iter().filter(|g| mask.contains(g.layer)).cloned().collect(),
        total_layers: grad.total_layers,
    })
}

/// Reads a single-sample input off the first layer: for that sample
/// `∂L/∂W₁ = ∂L/∂b₁ ⊗ x`, so any row with a nonzero bias gradient gives
/// `x = row / g_b`. The row with the largest `|g_b|` is used.
pub fn analytic_first_layer_recovery(masked: &LayerGradient, spec: &MlpSpec) -> Result<Vec<f64>> {
    let g = masked.group(1).ok_or(AttackError::FirstLayerMissing)?;
    let d = spec.input_dim();
    if g.weight.shape() != [spec.widths[1], d] {
        return Err(AttackError::Grouping(format!("first layer shape {:?}", g.weight.shape())));
    }
    let gb = g.bias.values();
    let (k, pivot) = gb
        .iter()
        .enumerate()
        .fold((0, 0.0f64), |best, (k, v)| if v.abs() > best.1.abs() { (k, *v) } else { best });
    if pivot.abs() <= EPS_DIV {
        return Err(AttackError::AllBiasZero);
    }
    Ok(g.weight.values()[k * d..(k + 1) * d].iter().map(|w| w / pivot).collect())
}

fn check_shapes(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(AttackError::ShapeMismatch(a.len(), b.len()));
    }
    Ok(())
}

/// Neumaier summation.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Peak signal-to-noise ratio in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &[f64], b: &[f64], peak: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let mse = compensated_sum(a.iter().zip(b).map(|(x, y)| (x - y).powi(2))) / a.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

/// Structural similarity over a single window spanning the whole image.
pub fn ssim(a: &[f64], b: &[f64], range: f64) -> Result<f64> {
    check_shapes(a, b)?;
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma).powi(2);
        vb += (y - mb).powi(2);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

/// Settings of a layer-subset attack sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    /// Classifier widths; the input must be 64 (8×8 images).
    pub widths: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    pub trials: usize,
    pub seed: u64,
    /// Subset sizes to sweep; defaults to `1..=N`.
    #[serde(default)]
    pub n_values: Option<Vec<usize>>,
    #[serde(default = "default_image_noise")]
    pub image_noise: f64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_image_noise() -> f64 {
    0.1
}

impl AttackConfig {
    pub fn validate(&self) -> Result<MlpSpec> {
        if self.trials == 0 {
            return Err(AttackError::Config("trials must be positive".into()));
        }
        if self.widths.first() != Some(&(training::DIGIT_SIDE * training::DIGIT_SIDE)) {
            return Err(AttackError::Config("widths must start with 64 inputs".into()));
        }
        if self.widths.last().is_some_and(|&k| k < 10) {
            return Err(AttackError::Config("widths must end with at least 10 outputs".into()));
        }
        let spec = MlpSpec::new(self.widths.clone(), self.activation).map_err(|e| AttackError::Config(e.to_string()))?;
        if let Some(ns) = &self.n_values {
            if let Some(&n) = ns.iter().find(|&&n| n == 0 || n > spec.layers()) {
                return Err(AttackError::Config(format!("n = {n} outside 1..={}", spec.layers())));
            }
        }
        Ok(spec)
    }
}

/// One line of the sweep report.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub n: usize,
    #[serde(rename = "N")]
    pub total: usize,
    pub trials: usize,
    #[serde(rename = "mean_S_prime")]
    pub mean_s_prime: f64,
    pub psnr_mean: f64,
    pub ssim_mean: f64,
    pub recovery_success_rate: f64,
}

struct Trial {
    s_prime: f64,
    psnr: f64,
    ssim: f64,
    recovered: bool,
}

fn run_trial(spec: &MlpSpec, n: usize, noise: f64, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let model = spec.init(&mut rng);
    let sample = synthetic_digits(1, noise, &mut rng)?;
    let x = sample.features(0).to_vec();
    let one = Dataset::new(x.len(), spec.classes(), vec![(x.clone(), sample.label(0))])?;
    let (_, grads) = training::gradient(spec, &model, &one)?;
    let grad = LayerGradient::from_model(&grads)?;
    let report = layer_sensitivity(&grad)?;
    let mask = GradientMask::random(n, grad.total_layers(), &mut rng)?;
    let masked = mask_gradient(&grad, &mask)?;
    let (guess, recovered) = match analytic_first_layer_recovery(&masked, spec) {
        Ok(x_hat) => (x_hat.into_iter().map(|v| v.clamp(0.0, 1.0)).collect(), true),
        Err(AttackError::FirstLayerMissing | AttackError::AllBiasZero) => (vec![0.5; x.len()], false),
        Err(e) => return Err(e),
    };
    Ok(Trial {
        s_prime: report.subset_total(&mask),
        psnr: psnr(&x, &guess, 1.0)?,
        ssim: ssim(&x, &guess, 1.0)?,
        recovered,
    })
}

/// Runs `trials` independent attacks for every subset size. Each trial
/// draws its own model, sample and mask from a seed derived from
/// `(seed, n, trial)`, so results do not depend on thread scheduling.
pub fn run_sweep(config: &AttackConfig) -> Result<Vec<SweepRow>> {
    let spec = config.validate()?;
    let total = spec.layers();
    let ns = config.n_values.clone().unwrap_or_else(|| (1..=total).collect());
    ns.into_iter()
        .map(|n| {
            let trials = (0..config.trials)
                .into_par_iter()
                .map(|k| run_trial(&spec, n, config.image_noise, trial_seed(config.seed, n, k)))
                .collect::<Result<Vec<_>>>()?;
            let count = trials.len() as f64;
            let mean = |f: fn(&Trial) -> f64| trials.iter().map(f).sum::<f64>() / count;
            Ok(SweepRow {
                n,
                total,
                trials: config.trials,
                mean_s_prime: mean(|t| t.s_prime),
                psnr_mean: mean(|t| t.psnr),
                ssim_mean: mean(|t| t.ssim),
                recovery_success_rate: mean(|t| f64::from(u8::from(t.recovered))),
            })
        })
        .collect()
}

fn trial_seed(seed: u64, n: usize, trial: usize) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for v in [n as u64, trial as u64] {
        h = (h ^ v).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    h
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grad_from(layers: &[(Vec<f64>, Vec<f64>)]) -> LayerGradient {
        let mut mats = Vec::new();
        for (k, (w, b)) in layers.iter().enumerate() {
            let rows = b.len();
            mats.push(ParamMatrix::new(2 * k + 1, vec![rows, w.len() / rows], w.clone(), Role::Weight).unwrap());
            mats.push(ParamMatrix::new(2 * k + 2, vec![rows], b.clone(), Role::Bias).unwrap());
        }
        LayerGradient::from_model(&ModelParams::new(mats).unwrap()).unwrap()
    }

    fn three_layers() -> LayerGradient {
        grad_from(&[
            (vec![0.0; 4], vec![0.0; 2]),
            (vec![2.0, -2.0, 2.0, -2.0], vec![-2.0, 2.0]),
            (vec![1.0, 3.0], vec![0.5]),
        ])
    }

    #[test]
    fn sensitivity_examples() {
        let report = layer_sensitivity(&three_layers()).unwrap();
        assert_eq!(report.scores[0], 0.0);
        assert_eq!(report.scores[1], 2.0);
        let zero = grad_from(&[(vec![0.0; 4], vec![0.0; 2])]);
        assert_eq!(layer_sensitivity(&zero).unwrap().total(), 0.0);
    }

    #[test]
    fn sensitivity_is_homogeneous() {
        let g = three_layers();
        let doubled = grad_from(&[
            (vec![0.0; 4], vec![0.0; 2]),
            (vec![4.0, -4.0, 4.0, -4.0], vec![-4.0, 4.0]),
            (vec![2.0, 6.0], vec![1.0]),
        ]);
        let s = layer_sensitivity(&g).unwrap().total();
        assert_eq!(layer_sensitivity(&doubled).unwrap().total(), 2.0 * s);
    }

    #[test]
    fn subset_expectation_examples() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let flat = SensitivityReport { scores: vec![2.0; 5] };
        assert_eq!(expected_subset_sensitivity(&flat, 2, 50, &mut rng).unwrap(), 4.0);
        let mixed = SensitivityReport {
            scores: vec![0.1, 0.7, 1.9, 3.3, 0.0],
        };
        assert_eq!(expected_subset_sensitivity(&mixed, 5, 3, &mut rng).unwrap(), mixed.total());
        let est = expected_subset_sensitivity(&mixed, 2, 10_000, &mut rng).unwrap();
        let exact = 2.0 / 5.0 * mixed.total();
        assert!((est - exact).abs() / exact < 0.02, "{est} vs {exact}");
        assert!(matches!(
            expected_subset_sensitivity(&mixed, 6, 1, &mut rng),
            Err(AttackError::SubsetSize { .. })
        ));
    }

    #[test]
    fn masking() {
        let g = three_layers();
        assert_eq!(mask_gradient(&g, &GradientMask::full(3)).unwrap(), g);
        assert!(mask_gradient(&g, &GradientMask::empty(3)).unwrap().groups().is_empty());
        let only = mask_gradient(&g, &GradientMask::new([1], 3).unwrap()).unwrap();
        assert_eq!(only.groups(), &g.groups()[..1]);
        assert!(matches!(GradientMask::new([4], 3), Err(AttackError::UnknownLayer { .. })));
    }

    #[test]
    fn recovery_from_outer_product() {
        let spec = MlpSpec::new(vec![2, 2, 2], Activation::Relu).unwrap();
        let g = grad_from(&[
            (vec![0.5, 1.0, 0.0, 0.0], vec![0.5, 0.0]),
            (vec![0.0; 4], vec![0.0; 2]),
        ]);
        assert_eq!(analytic_first_layer_recovery(&g, &spec).unwrap(), vec![1.0, 2.0]);
        let masked = mask_gradient(&g, &GradientMask::new([2], 2).unwrap()).unwrap();
        assert!(matches!(
            analytic_first_layer_recovery(&masked, &spec),
            Err(AttackError::FirstLayerMissing)
        ));
        let dead = grad_from(&[(vec![0.0; 4], vec![0.0; 2]), (vec![0.0; 4], vec![0.0; 2])]);
        assert!(matches!(
            analytic_first_layer_recovery(&dead, &spec),
            Err(AttackError::AllBiasZero)
        ));
    }

    #[test]
    fn recovery_from_real_gradient() {
        let spec = MlpSpec::new(vec![6, 5, 3], Activation::Tanh).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let model = spec.init(&mut rng);
        let x: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let data = Dataset::new(6, 3, vec![(x.clone(), 1)]).unwrap();
        let (_, grads) = training::gradient(&spec, &model, &data).unwrap();
        let x_hat = analytic_first_layer_recovery(&LayerGradient::from_model(&grads).unwrap(), &spec).unwrap();
        let err = x.iter().zip(&x_hat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn image_metrics() {
        let a: Vec<f64> = (0..16).map(|k| k as f64 / 16.0).collect();
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        assert_eq!(ssim(&a, &a, 1.0).unwrap(), 1.0);
        let zeros = vec![0.0; 16];
        let tenth = vec![0.1; 16];
        assert_eq!(psnr(&zeros, &tenth, 1.0).unwrap(), 20.0);
        assert_eq!(psnr(&a, &tenth, 1.0).unwrap(), psnr(&tenth, &a, 1.0).unwrap());
        assert!(matches!(psnr(&a, &a[..3], 1.0), Err(AttackError::ShapeMismatch(16, 3))));
    }

    #[test]
    fn sweep_is_deterministic_and_shows_the_dichotomy() {
        let config = AttackConfig {
            widths: vec![64, 16, 12, 10],
            activation: Activation::Relu,
            trials: 15,
            seed: 3,
            n_values: None,
            image_noise: 0.1,
        };
        let rows = run_sweep(&config).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows, run_sweep(&config).unwrap());
        let full = rows.last().unwrap();
        assert_eq!(full.recovery_success_rate, 1.0);
        assert!(full.psnr_mean > 90.0);
        assert!(rows[0].recovery_success_rate < 1.0);
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("n,N,trials,mean_S_prime,psnr_mean,ssim_mean,recovery_success_rate\n"));
    }

    #[test]
    fn zero_trials_rejected() {
        let config = AttackConfig {
            widths: vec![64, 8, 10],
            activation: Activation::Relu,
            trials: 0,
            seed: 0,
            n_values: None,
            image_noise: 0.1,
        };
        assert!(matches!(run_sweep(&config), Err(AttackError::Config(_))));
    }
}
