//! Local training: datasets, partitioning, a small fully connected
//! classifier with exact gradients, SGD and evaluation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelParams, ParamMatrix, Role};

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("cannot split {samples} samples across {parts} clients")]
    TooFewSamples { samples: usize, parts: usize },
    #[error("label {label} out of range for {classes} classes")]
    InvalidLabel { label: usize, classes: usize },
    #[error("feature vector of length {found}, expected {expected}")]
    FeatureLength { expected: usize, found: usize },
    #[error("non-finite feature value")]
    NonFinite,
    #[error("model does not match the classifier layout: {0}")]
    ShapeMismatch(String),
    #[error("invalid classifier: {0}")]
    InvalidSpec(String),
    #[error("training diverged (non-finite loss)")]
    Divergence,
    #[error("idx file: {0}")]
    Idx(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub type Result<T, E = TrainingError> = std::result::Result<T, E>;

/// Labelled samples stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, samples: Vec<(Vec<f64>, usize)>) -> Result<Self> {
        let mut features = Vec::with_capacity(samples.len() * dim);
        let mut labels = Vec::with_capacity(samples.len());
        for (x, y) in samples {
            if x.len() != dim {
                return Err(TrainingError::FeatureLength {
                    expected: dim,
                    found: x.len(),
                });
            }
            features.extend(x);
            labels.push(y);
        }
        Self::from_flat(dim, classes, features, labels)
    }

    pub fn from_flat(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if features.len() != dim * labels.len() {
            return Err(TrainingError::FeatureLength {
                expected: dim * labels.len(),
                found: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
            return Err(TrainingError::InvalidLabel { label, classes });
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(TrainingError::NonFinite);
        }
        Ok(Self {
            dim,
            classes,
            features,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut features = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            features.extend_from_slice(self.features(i));
        }
        Dataset {
            dim: self.dim,
            classes: self.classes,
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Keeps the first part for training and holds out the trailing
    /// `test_fraction` of samples (at least one when possible).
    pub fn split(&self, test_fraction: f64) -> (Dataset, Dataset) {
        let n = self.len();
        let test = ((n as f64 * test_fraction).round() as usize).min(n.saturating_sub(1));
        let cut = n - test;
        let idx: Vec<usize> = (0..n).collect();
        (self.subset(&idx[..cut]), self.subset(&idx[cut..]))
    }
}

/// Shuffles and deals `data` into `parts` disjoint datasets whose sizes
/// differ by at most one.
pub fn partition<R: Rng + ?Sized>(data: &Dataset, parts: usize, rng: &mut R) -> Result<Vec<Dataset>> {
    if parts == 0 || parts > data.len() {
        return Err(TrainingError::TooFewSamples {
            samples: data.len(),
            parts,
        });
    }
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.shuffle(rng);
    let base = data.len() / parts;
    let extra = data.len() % parts;
    let mut start = 0;
    Ok((0..parts)
        .map(|k| {
            let size = base + usize::from(k < extra);
            let part = data.subset(&idx[start..start + size]);
            start += size;
            part
        })
        .collect())
}

/// Isotropic Gaussian clusters around centers drawn from `N(0, 3²)`.
pub fn gaussian_blobs<R: Rng + ?Sized>(samples: usize, classes: usize, dim: usize, spread: f64, rng: &mut R) -> Result<Dataset> {
    if classes == 0 || dim == 0 {
        return Err(TrainingError::InvalidSpec("blobs need at least one class and one feature".into()));
    }
    let center_dist = Normal::new(0.0, 3.0).expect("valid normal");
    let noise = Normal::new(0.0, spread.max(0.0)).map_err(|e| TrainingError::InvalidSpec(e.to_string()))?;
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| (0..dim).map(|_| center_dist.sample(rng)).collect())
        .collect();
    let rows = (0..samples)
        .map(|i| {
            let y = i % classes;
            (centers[y].iter().map(|c| c + noise.sample(rng)).collect(), y)
        })
        .collect();
    Dataset::new(dim, classes, rows)
}

const GLYPHS: [[&str; 7]; 10] = [
    [".###.", "#...#", "#..##", "#.#.#", "##..#", "#...#", ".###."],
    ["..#..", ".##..", "..#..", "..#..", "..#..", "..#..", ".###."],
    [".###.", "#...#", "....#", "...#.", "..#..", ".#...", "#####"],
    ["#####", "...#.", "..#..", "...#.", "....#", "#...#", ".###."],
    ["...#.", "..##.", ".#.#.", "#..#.", "#####", "...#.", "...#."],
    ["#####", "#....", "####.", "....#", "....#", "#...#", ".###."],
    ["..##.", ".#...", "#....", "####.", "#...#", "#...#", ".###."],
    ["#####", "....#", "...#.", "..#..", ".#...", ".#...", ".#..."],
    [".###.", "#...#", "#...#", ".###.", "#...#", "#...#", ".###."],
    [".###.", "#...#", "#...#", ".####", "....#", "...#.", ".##.."],
];

/// Side length of the synthetic digit images.
pub const DIGIT_SIDE: usize = 8;

/// 8×8 digit images in `[0, 1]`: a 5×7 glyph at a random offset with random
/// stroke intensity plus Gaussian pixel noise. Labels cycle through 0..10.
pub fn synthetic_digits<R: Rng + ?Sized>(samples: usize, noise: f64, rng: &mut R) -> Result<Dataset> {
    let pixel_noise = Normal::new(0.0, noise.max(0.0)).map_err(|e| TrainingError::InvalidSpec(e.to_string()))?;
    let intensity = Uniform::new_inclusive(0.7, 1.0).expect("valid range");
    let rows = (0..samples)
        .map(|i| {
            let y = i % 10;
            let (dr, dc) = (rng.random_range(0..=1), rng.random_range(0..=3));
            let ink = intensity.sample(rng);
            let mut img = vec![0.0; DIGIT_SIDE * DIGIT_SIDE];
            for (r, line) in GLYPHS[y].iter().enumerate() {
                for (c, ch) in line.bytes().enumerate() {
                    if ch == b'#' {
                        img[(r + dr) * DIGIT_SIDE + c + dc] = ink;
                    }
                }
            }
            for px in &mut img {
                *px = (*px + pixel_noise.sample(rng)).clamp(0.0, 1.0);
            }
            (img, y)
        })
        .collect();
    Dataset::new(DIGIT_SIDE * DIGIT_SIDE, 10, rows)
}

const IDX_IMAGES: u32 = 0x0000_0803;
const IDX_LABELS: u32 = 0x0000_0801;

fn idx_header(bytes: &[u8], magic: u32, dims: usize) -> Result<Vec<usize>> {
    let need = 4 + 4 * dims;
    if bytes.len() < need {
        return Err(TrainingError::Idx(format!("header needs {need} bytes, file has {}", bytes.len())));
    }
    let be = |k: usize| u32::from_be_bytes(bytes[k..k + 4].try_into().unwrap());
    if be(0) != magic {
        return Err(TrainingError::Idx(format!("magic {:#010x}, expected {magic:#010x}", be(0))));
    }
    Ok((0..dims).map(|d| be(4 + 4 * d) as usize).collect())
}

/// Parses an IDX image file into `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let dims = idx_header(bytes, IDX_IMAGES, 3)?;
    let (n, rows, cols) = (dims[0], dims[1], dims[2]);
    let body = &bytes[16..];
    let size = n * rows * cols;
    if body.len() != size {
        return Err(TrainingError::Idx(format!("{} pixel bytes, header implies {size}", body.len())));
    }
    Ok((n, rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let n = idx_header(bytes, IDX_LABELS, 1)?[0];
    let body = &bytes[8..];
    if body.len() != n {
        return Err(TrainingError::Idx(format!("{} label bytes, header implies {n}", body.len())));
    }
    Ok(body.to_vec())
}

/// Loads an IDX image/label pair, scaling pixels to `[0, 1]`. `limit` keeps
/// only the first samples.
pub fn load_idx(images: &Path, labels: &Path, limit: Option<usize>) -> Result<Dataset> {
    let (n, rows, cols, pixels) = parse_idx_images(&fs::read(images)?)?;
    let labels = parse_idx_labels(&fs::read(labels)?)?;
    if labels.len() != n {
        return Err(TrainingError::Idx(format!("{n} images but {} labels", labels.len())));
    }
    let keep = limit.unwrap_or(n).min(n);
    let dim = rows * cols;
    let features = pixels[..keep * dim].iter().map(|&p| p as f64 / 255.0).collect();
    let labels: Vec<usize> = labels[..keep].iter().map(|&l| l as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1).max(10);
    Dataset::from_flat(dim, classes, features, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - z.tanh().powi(2),
        }
    }
}

/// Fully connected classifier `widths[0] → … → widths[L]` with softmax
/// cross-entropy loss. Matrix order is `w1, b1, w2, b2, …`, weights shaped
/// `[out, in]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(TrainingError::InvalidSpec(format!("widths {widths:?}")));
        }
        Ok(Self { widths, activation })
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn matrix_count(&self) -> usize {
        2 * self.layers()
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn shapes(&self) -> Vec<(Vec<usize>, Role)> {
        self.widths
            .windows(2)
            .flat_map(|w| [(vec![w[1], w[0]], Role::Weight), (vec![w[1]], Role::Bias)])
            .collect()
    }

    /// Weights and biases uniform in `±1/√fan_in`.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> ModelParams {
        let matrices = self
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(k, (shape, role))| {
                let fan_in = self.widths[k / 2] as f64;
                let bound = 1.0 / fan_in.sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("valid range");
                let values = (0..shape.iter().product::<usize>()).map(|_| dist.sample(rng)).collect();
                ParamMatrix::new(k + 1, shape, values, role).expect("consistent shape")
            })
            .collect();
        ModelParams::new(matrices).expect("indices are sequential")
    }

    pub fn zeros(&self) -> ModelParams {
        let matrices = self
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(k, (shape, role))| ParamMatrix::zeros(k + 1, shape, role).expect("consistent shape"))
            .collect();
        ModelParams::new(matrices).expect("indices are sequential")
    }

    pub fn check(&self, model: &ModelParams) -> Result<()> {
        let shapes = self.shapes();
        if model.len() != shapes.len() {
            return Err(TrainingError::ShapeMismatch(format!(
                "{} matrices, expected {}",
                model.len(),
                shapes.len()
            )));
        }
        for (m, (shape, _)) in model.matrices().iter().zip(&shapes) {
            if m.shape() != shape.as_slice() {
                return Err(TrainingError::ShapeMismatch(format!(
                    "matrix {} has shape {:?}, expected {shape:?}",
                    m.index(),
                    m.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.input_dim() {
            return Err(TrainingError::ShapeMismatch(format!(
                "{} features, classifier expects {}",
                data.dim(),
                self.input_dim()
            )));
        }
        if data.classes() > self.classes() {
            return Err(TrainingError::ShapeMismatch(format!(
                "{} classes, classifier has {} outputs",
                data.classes(),
                self.classes()
            )));
        }
        Ok(())
    }

    /// Pre-activations of every layer; the last entry holds the logits.
    fn forward(&self, mats: &[&[f64]], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers());
        for l in 0..self.layers() {
            let (w, b) = (mats[2 * l], mats[2 * l + 1]);
            let input = &acts[l];
            let n_in = self.widths[l];
            let z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, bias)| bias + dot(&w[o * n_in..(o + 1) * n_in], input))
                .collect();
            if l + 1 < self.layers() {
                acts.push(z.iter().map(|&v| self.activation.apply(v)).collect());
            }
            pre.push(z);
        }
        (acts, pre)
    }

    /// Loss of one sample, accumulating its gradient scaled by `weight`.
    fn backprop(&self, mats: &[&[f64]], x: &[f64], y: usize, weight: f64, grads: &mut [Vec<f64>]) -> f64 {
        let (acts, pre) = self.forward(mats, x);
        let logits = pre.last().unwrap();
        let (probs, loss) = softmax_xent(logits, y);
        let mut delta = probs;
        delta[y] -= 1.0;
        for l in (0..self.layers()).rev() {
            let n_in = self.widths[l];
            let input = &acts[l];
            for (o, d) in delta.iter().enumerate() {
                let dw = d * weight;
                for (g, a) in grads[2 * l][o * n_in..(o + 1) * n_in].iter_mut().zip(input) {
                    *g += dw * a;
                }
                grads[2 * l + 1][o] += dw;
            }
            if l > 0 {
                let w = mats[2 * l];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = delta.iter().enumerate().map(|(o, d)| d * w[o * n_in + i]).sum();
                        back * self.activation.derivative(pre[l - 1][i])
                    })
                    .collect();
            }
        }
        loss
    }

    fn logits(&self, mats: &[&[f64]], x: &[f64]) -> Vec<f64> {
        self.forward(mats, x).1.pop().unwrap()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_xent(logits: &[f64], y: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = sum.ln() - (logits[y] - max);
    (exps.into_iter().map(|e| e / sum).collect(), loss)
}

fn views(model: &ModelParams) -> Vec<&[f64]> {
    model.matrices().iter().map(ParamMatrix::values).collect()
}

fn grads_to_model(spec: &MlpSpec, grads: Vec<Vec<f64>>) -> ModelParams {
    let matrices = spec
        .shapes()
        .into_iter()
        .zip(grads)
        .enumerate()
        .map(|(k, ((shape, role), g))| ParamMatrix::new(k + 1, shape, g, role).expect("consistent shape"))
        .collect();
    ModelParams::new(matrices).expect("indices are sequential")
}

/// Mean cross-entropy over `data`.
pub fn loss(spec: &MlpSpec, model: &ModelParams, data: &Dataset) -> Result<f64> {
    spec.check(model)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mats = views(model);
    let total: f64 = (0..data.len())
        .map(|i| softmax_xent(&spec.logits(&mats, data.features(i)), data.label(i)).1)
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean loss and its exact gradient over `data`, shaped like the model.
pub fn gradient(spec: &MlpSpec, model: &ModelParams, data: &Dataset) -> Result<(f64, ModelParams)> {
    spec.check(model)?;
    spec.check_data(data)?;
    if data.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mats = views(model);
    let mut grads: Vec<Vec<f64>> = mats.iter().map(|m| vec![0.0; m.len()]).collect();
    let w = 1.0 / data.len() as f64;
    let total: f64 = (0..data.len())
        .map(|i| spec.backprop(&mats, data.features(i), data.label(i), w, &mut grads))
        .sum();
    Ok((total * w, grads_to_model(spec, grads)))
}

/// Local optimizer settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            learning_rate: 0.1,
            batch_size: 16,
        }
    }
}

/// Minibatch SGD over `part`, reshuffled every epoch. Returns the trained
/// model and `t = |part|`.
pub fn local_train<R: Rng + ?Sized>(
    spec: &MlpSpec,
    model: &ModelParams,
    part: &Dataset,
    sgd: &SgdConfig,
    rng: &mut R,
) -> Result<(ModelParams, u64)> {
    spec.check(model)?;
    spec.check_data(part)?;
    if part.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let mut params: Vec<Vec<f64>> = model.matrices().iter().map(|m| m.values().to_vec()).collect();
    let mut order: Vec<usize> = (0..part.len()).collect();
    let batch = sgd.batch_size.max(1);
    for _ in 0..sgd.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(batch) {
            let mats: Vec<&[f64]> = params.iter().map(Vec::as_slice).collect();
            let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.len()]).collect();
            let w = 1.0 / chunk.len() as f64;
            let mut batch_loss = 0.0;
            for &i in chunk {
                batch_loss += spec.backprop(&mats, part.features(i), part.label(i), w, &mut grads);
            }
            if !batch_loss.is_finite() {
                return Err(TrainingError::Divergence);
            }
            for (p, g) in params.iter_mut().zip(&grads) {
                for (v, d) in p.iter_mut().zip(g) {
                    *v -= sgd.learning_rate * d;
                }
            }
        }
    }
    Ok((grads_to_model(spec, params), part.len() as u64))
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict(spec: &MlpSpec, model: &ModelParams, x: &[f64]) -> usize {
    let logits = spec.logits(&views(model), x);
    let mut best = 0;
    for (k, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = k;
        }
    }
    best
}

/// Fraction of correctly classified samples.
pub fn evaluate(spec: &MlpSpec, model: &ModelParams, test: &Dataset) -> Result<f64> {
    spec.check(model)?;
    spec.check_data(test)?;
    if test.is_empty() {
        return Err(TrainingError::EmptyDataset);
    }
    let correct = (0..test.len())
        .filter(|&i| predict(spec, model, test.features(i)) == test.label(i))
        .count();
    Ok(correct as f64 / test.len() as f64)
}
