//! Softmax classifier with closed-form gradients.
//!
//! Two architectures: multinomial logistic regression (`linear`) and a single
//! tanh hidden layer followed by a softmax output (`mlp-1h`). Losses are
//! cross-entropy on probabilities floored at [`PROB_FLOOR`].

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;
use thiserror::Error;

use crate::numfmt::{push_f64_array, push_json_str, push_key};
use crate::report::write_atomic;

/// Probabilities are floored here before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),
    #[error("feature length {got} does not match model feature_dim {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("label {label} out of range for {class_count} classes")]
    LabelOutOfRange { label: usize, class_count: usize },
    #[error("{what}: expected length {expected}, got {got}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parameter / gradient shapes differ")]
    ShapeMismatch,
    #[error("non-finite parameter value")]
    NonFinite,
    #[error("unknown architecture `{0}` (expected linear or mlp-1h)")]
    UnknownArchitecture(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Architecture {
    Linear,
    /// One tanh hidden layer of the given width.
    Mlp {
        hidden: usize,
    },
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Linear => "linear",
            Architecture::Mlp { .. } => "mlp-1h",
        }
    }

    /// Builds an architecture from its tag and the hidden width (ignored for `linear`).
    pub fn from_tag(tag: &str, hidden: usize) -> Result<Self, ModelError> {
        match tag {
            "linear" => Ok(Architecture::Linear),
            "mlp-1h" => Ok(Architecture::Mlp { hidden }),
            other => Err(ModelError::UnknownArchitecture(other.to_string())),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Architecture::Linear => f.write_str("linear"),
            Architecture::Mlp { hidden } => write!(f, "mlp-1h(h={hidden})"),
        }
    }
}

impl FromStr for Architecture {
    type Err = ModelError;

    /// Accepts `linear`, `mlp-1h` (hidden width 16) or `mlp-1h:<h>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.split_once(':') {
            Some(("mlp-1h", h)) => h
                .parse()
                .map(|hidden| Architecture::Mlp { hidden })
                .map_err(|_| ModelError::UnknownArchitecture(s.to_string())),
            _ => Architecture::from_tag(s, 16),
        }
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `rows x cols`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(rows: usize, cols: usize) -> Self {
        Dense {
            rows,
            cols,
            weights: vec![0.0; rows * cols],
            bias: vec![0.0; rows],
        }
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.cols)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>())
            .collect()
    }

    fn same_shape(&self, other: &Dense) -> bool {
        self.rows == other.rows && self.cols == other.cols
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub class_count: usize,
    pub feature_dim: usize,
    /// Input-to-output order: `[output]` for linear, `[hidden, output]` for mlp-1h.
    pub layers: Vec<Dense>,
}

/// Entry-wise sums of weighted per-example gradients, shaped like [`ModelParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientAccumulator {
    pub layers: Vec<Dense>,
}

impl GradientAccumulator {
    pub fn zeros_like(params: &ModelParams) -> Self {
        GradientAccumulator {
            layers: params
                .layers
                .iter()
                .map(|l| Dense::zeros(l.rows, l.cols))
                .collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Entry-wise sum; shapes must match.
    pub fn add(&self, other: &GradientAccumulator) -> Result<GradientAccumulator, ModelError> {
        if self.layers.len() != other.layers.len()
            || self
                .layers
                .iter()
                .zip(&other.layers)
                .any(|(a, b)| !a.same_shape(b))
        {
            return Err(ModelError::ShapeMismatch);
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| Dense {
                rows: a.rows,
                cols: a.cols,
                weights: a.weights.iter().zip(&b.weights).map(|(x, y)| x + y).collect(),
                bias: a.bias.iter().zip(&b.bias).map(|(x, y)| x + y).collect(),
            })
            .collect();
        Ok(GradientAccumulator { layers })
    }
}

fn flatten_layers(layers: &[Dense]) -> Vec<f64> {
    layers
        .iter()
        .flat_map(|l| l.weights.iter().chain(&l.bias).copied())
        .collect()
}

impl ModelParams {
    pub fn zeros(arch: Architecture, class_count: usize, feature_dim: usize) -> Result<Self, ModelError> {
        check_dims(arch, class_count, feature_dim)?;
        let layers = match arch {
            Architecture::Linear => vec![Dense::zeros(class_count, feature_dim)],
            Architecture::Mlp { hidden } => vec![
                Dense::zeros(hidden, feature_dim),
                Dense::zeros(class_count, hidden),
            ],
        };
        Ok(ModelParams {
            arch,
            class_count,
            feature_dim,
            layers,
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        flatten_layers(&self.layers)
    }

    /// Inverse of [`ModelParams::flatten`].
    pub fn set_flat(&mut self, values: &[f64]) -> Result<(), ModelError> {
        if values.len() != self.param_count() {
            return Err(ModelError::LengthMismatch {
                what: "flat parameters",
                expected: self.param_count(),
                got: values.len(),
            });
        }
        let mut it = values.iter().copied();
        for l in &mut self.layers {
            for w in l.weights.iter_mut().chain(l.bias.iter_mut()) {
                *w = it.next().expect("length checked");
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(&l.bias).all(|x| x.is_finite()))
    }

    fn check_features(&self, features: &[f64]) -> Result<(), ModelError> {
        if features.len() != self.feature_dim {
            return Err(ModelError::DimMismatch {
                expected: self.feature_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    /// Hidden activations (mlp-1h only) and output logits.
    fn logits(&self, x: &[f64]) -> (Option<Vec<f64>>, Vec<f64>) {
        match self.arch {
            Architecture::Linear => (None, self.layers[0].apply(x)),
            Architecture::Mlp { .. } => {
                let h: Vec<f64> = self.layers[0].apply(x).into_iter().map(f64::tanh).collect();
                let z = self.layers[1].apply(&h);
                (Some(h), z)
            }
        }
    }

    fn output_layer(&self) -> &Dense {
        self.layers.last().expect("at least one layer")
    }
}

fn check_dims(arch: Architecture, class_count: usize, feature_dim: usize) -> Result<(), ModelError> {
    if class_count < 2 {
        return Err(ModelError::InvalidDims(format!(
            "class_count must be >= 2, got {class_count}"
        )));
    }
    if feature_dim == 0 {
        return Err(ModelError::InvalidDims("feature_dim must be >= 1".into()));
    }
    if let Architecture::Mlp { hidden: 0 } = arch {
        return Err(ModelError::InvalidDims("hidden width must be >= 1".into()));
    }
    Ok(())
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)) from a ChaCha8 stream seeded
/// with `seed`; biases zero.
pub fn init_params(
    arch: Architecture,
    class_count: usize,
    feature_dim: usize,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    let mut params = ModelParams::zeros(arch, class_count, feature_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for layer in &mut params.layers {
        let bound = 1.0 / (layer.cols as f64).sqrt();
        for w in &mut layer.weights {
            *w = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn forward(params: &ModelParams, features: &[f64]) -> Result<Vec<f64>, ModelError> {
    params.check_features(features)?;
    let (_, z) = params.logits(features);
    Ok(softmax(&z))
}

/// Cross-entropy `-ln(max(probs[label], PROB_FLOOR))`.
pub fn per_example_loss(probs: &[f64], label: usize) -> Result<f64, ModelError> {
    let p = probs.get(label).ok_or(ModelError::LabelOutOfRange {
        label,
        class_count: probs.len(),
    })?;
    Ok(-p.max(PROB_FLOOR).ln())
}

/// Gradient of `sum_i weights[i] * L_i` with respect to every parameter.
///
/// Per example the logit gradient is `p - onehot(label)`; it is zero when
/// the probability floor is active, since the clamped loss is constant there.
pub fn backward_weighted(
    params: &ModelParams,
    batch: &[(&[f64], usize)],
    weights: &[f64],
) -> Result<GradientAccumulator, ModelError> {
    if weights.len() != batch.len() {
        return Err(ModelError::LengthMismatch {
            what: "weights",
            expected: batch.len(),
            got: weights.len(),
        });
    }
    let mut grad = GradientAccumulator::zeros_like(params);
    let c = params.class_count;
    for (&(x, label), &w) in batch.iter().zip(weights) {
        params.check_features(x)?;
        if label >= c {
            return Err(ModelError::LabelOutOfRange {
                label,
                class_count: c,
            });
        }
        let (hidden, z) = params.logits(x);
        let probs = softmax(&z);
        if probs[label] < PROB_FLOOR {
            continue;
        }
        let delta: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(k, p)| w * (p - if k == label { 1.0 } else { 0.0 }))
            .collect();

        let out_input: &[f64] = hidden.as_deref().unwrap_or(x);
        let out_grad = grad.layers.last_mut().expect("output layer");
        accumulate_outer(out_grad, &delta, out_input);

        if let Some(h) = &hidden {
            let out = params.output_layer();
            let dh: Vec<f64> = (0..out.cols)
                .map(|j| {
                    let back: f64 = (0..out.rows)
                        .map(|k| out.weights[k * out.cols + j] * delta[k])
                        .sum();
                    back * (1.0 - h[j] * h[j])
                })
                .collect();
            accumulate_outer(&mut grad.layers[0], &dh, x);
        }
    }
    Ok(grad)
}

fn accumulate_outer(layer: &mut Dense, delta: &[f64], input: &[f64]) {
    for (k, d) in delta.iter().enumerate() {
        let row = &mut layer.weights[k * layer.cols..(k + 1) * layer.cols];
        for (w, xi) in row.iter_mut().zip(input) {
            *w += d * xi;
        }
        layer.bias[k] += d;
    }
}

/// `params - lr * (grads + weight_decay * params)`; biases are not decayed.
pub fn sgd_step(
    params: &ModelParams,
    grads: &GradientAccumulator,
    lr: f64,
    weight_decay: f64,
) -> Result<ModelParams, ModelError> {
    if params.layers.len() != grads.layers.len()
        || params
            .layers
            .iter()
            .zip(&grads.layers)
            .any(|(p, g)| !p.same_shape(g))
    {
        return Err(ModelError::ShapeMismatch);
    }
    let mut next = params.clone();
    for (layer, g) in next.layers.iter_mut().zip(&grads.layers) {
        for (w, gw) in layer.weights.iter_mut().zip(&g.weights) {
            *w -= lr * (gw + weight_decay * *w);
        }
        for (b, gb) in layer.bias.iter_mut().zip(&g.bias) {
            *b -= lr * gb;
        }
    }
    Ok(next)
}

/// Argmax of the class probabilities; ties go to the lowest class index.
pub fn predict(params: &ModelParams, features: &[f64]) -> Result<usize, ModelError> {
    Ok(argmax(&forward(params, features)?))
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointLayer {
    rows: usize,
    cols: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Checkpoint {
    architecture: String,
    class_count: usize,
    feature_dim: usize,
    #[serde(default)]
    hidden: Option<usize>,
    layers: Vec<CheckpointLayer>,
}

impl ModelParams {
    /// Checkpoint JSON: architecture tag, dimensions and row-major weight
    /// arrays with 17 significant digits.
    pub fn to_checkpoint_json(&self) -> Result<String, ModelError> {
        if !self.is_finite() {
            return Err(ModelError::NonFinite);
        }
        let mut out = String::from("{");
        push_key(&mut out, "architecture");
        push_json_str(&mut out, self.arch.tag());
        out.push_str(&format!(
            ",\"class_count\":{},\"feature_dim\":{},",
            self.class_count, self.feature_dim
        ));
        if let Architecture::Mlp { hidden } = self.arch {
            out.push_str(&format!("\"hidden\":{hidden},"));
        }
        out.push_str("\"layers\":[");
        for (i, l) in self.layers.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            out.push_str(&format!("{{\"rows\":{},\"cols\":{},\"weights\":", l.rows, l.cols));
            push_f64_array(&mut out, &l.weights);
            out.push_str(",\"bias\":");
            push_f64_array(&mut out, &l.bias);
            out.push('}');
        }
        out.push_str("]}\n");
        Ok(out)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self, ModelError> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        let arch = match (ck.architecture.as_str(), ck.hidden) {
            ("mlp-1h", Some(h)) => Architecture::Mlp { hidden: h },
            ("mlp-1h", None) => {
                return Err(ModelError::Checkpoint(
                    "mlp-1h checkpoint without `hidden`".into(),
                ))
            }
            (tag, _) => Architecture::from_tag(tag, 0)?,
        };
        let mut params = ModelParams::zeros(arch, ck.class_count, ck.feature_dim)?;
        if ck.layers.len() != params.layers.len() {
            return Err(ModelError::Checkpoint(format!(
                "expected {} layers, found {}",
                params.layers.len(),
                ck.layers.len()
            )));
        }
        for (dst, src) in params.layers.iter_mut().zip(ck.layers) {
            if src.rows != dst.rows
                || src.cols != dst.cols
                || src.weights.len() != dst.rows * dst.cols
                || src.bias.len() != dst.rows
            {
                return Err(ModelError::Checkpoint(format!(
                    "layer shape {}x{} does not match architecture {}x{}",
                    src.rows, src.cols, dst.rows, dst.cols
                )));
            }
            dst.weights = src.weights;
            dst.bias = src.bias;
        }
        if !params.is_finite() {
            return Err(ModelError::NonFinite);
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        write_atomic(path, self.to_checkpoint_json()?.as_bytes()).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_checkpoint_json(&text)
    }
}
