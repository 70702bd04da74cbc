//! Dense feed-forward classifier with hand-written backpropagation.
//!
//! Activations are column vectors: each layer computes `y = W·x + b`, and a
//! batch stores one sample per column. Hidden layers use ReLU; the final
//! layer is linear and feeds a softmax cross-entropy head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compressors::FactorizedLayer;
use crate::linalg::{DenseMatrix, LinalgError};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("layer {layer}: {detail}")]
    LayerShape { layer: usize, detail: String },
    #[error("input dimension {got} does not match model input {expected}")]
    InputDim { expected: usize, got: usize },
    #[error("label {label} at sample {index} is outside 0..{classes}")]
    Label { index: usize, label: usize, classes: usize },
    #[error("batch has {inputs} input columns but {labels} labels")]
    BatchSize { inputs: usize, labels: usize },
    #[error("model needs at least one layer")]
    NoLayers,
    #[error(
        "layer {layer}: identity activation is only allowed on the final layer and the final layer must be identity"
    )]
    Activation { layer: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &DenseMatrix) -> DenseMatrix {
        match self {
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Multiplies `grad` by the activation derivative at `z` (ReLU'(0) = 0).
    fn backprop(self, z: &DenseMatrix, grad: &mut DenseMatrix) {
        if self == Activation::Relu {
            for (g, &v) in grad.data_mut().iter_mut().zip(z.data()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    /// `out_dim × in_dim`.
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

/// A layer is either a full dense weight or a compressed two-factor
/// replacement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Layer {
    Dense(DenseLayer),
    Factorized(FactorizedLayer),
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.cols(),
            Layer::Factorized(f) => f.right.cols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.rows(),
            Layer::Factorized(f) => f.left.rows(),
        }
    }

    pub fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Factorized(f) => f.activation,
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            Layer::Dense(d) => &d.bias,
            Layer::Factorized(f) => &f.bias,
        }
    }

    /// The (possibly reconstructed) `out × in` weight.
    pub fn effective_weight(&self) -> DenseMatrix {
        match self {
            Layer::Dense(d) => d.weight.clone(),
            Layer::Factorized(f) => f.reconstruct(),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.weight.rows() * d.weight.cols() + d.bias.len(),
            Layer::Factorized(f) => f.rank * (f.left.rows() + f.right.cols()) + f.bias.len(),
        }
    }

    pub fn as_dense(&self) -> Option<&DenseLayer> {
        match self {
            Layer::Dense(d) => Some(d),
            Layer::Factorized(_) => None,
        }
    }

    pub fn as_factorized(&self) -> Option<&FactorizedLayer> {
        match self {
            Layer::Factorized(f) => Some(f),
            Layer::Dense(_) => None,
        }
    }

    /// `W·x + b` over a batch, plus the factorized intermediate `R·x`.
    fn affine(&self, x: &DenseMatrix) -> (DenseMatrix, Option<DenseMatrix>) {
        let (mut z, mid) = match self {
            Layer::Dense(d) => (d.weight.matmul(x), None),
            Layer::Factorized(f) => {
                let h = f.right.matmul(x);
                (f.left.matmul(&h), Some(h))
            }
        };
        for (i, &b) in self.bias().iter().enumerate() {
            z.row_mut(i).iter_mut().for_each(|v| *v += b);
        }
        (z, mid)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<Layer>,
}

/// Inputs stored one sample per column plus integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Batch {
    pub inputs: DenseMatrix,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: DenseMatrix, labels: Vec<usize>) -> Result<Self, ModelError> {
        if inputs.cols() != labels.len() {
            return Err(ModelError::BatchSize {
                inputs: inputs.cols(),
                labels: labels.len(),
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.rows()
    }

    /// Sub-batch holding the given sample indices, in order.
    pub fn select(&self, indices: &[usize]) -> Batch {
        Batch {
            inputs: self.inputs.select_cols(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn sample(&self, index: usize) -> Batch {
        self.select(&[index])
    }
}

/// Per-layer gradient, mirroring the layer kind.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Dense {
        weight: DenseMatrix,
        bias: Vec<f64>,
    },
    Factorized {
        left: DenseMatrix,
        right: DenseMatrix,
        bias: Vec<f64>,
    },
}

impl LayerGrad {
    /// Weight gradient of a dense layer.
    ///
    /// # Panics
    /// Panics for factorized layers.
    pub fn dense_weight(&self) -> &DenseMatrix {
        match self {
            LayerGrad::Dense { weight, .. } => weight,
            LayerGrad::Factorized { .. } => panic!("factorized layer has no dense weight gradient"),
        }
    }

    pub fn bias(&self) -> &[f64] {
        match self {
            LayerGrad::Dense { bias, .. } | LayerGrad::Factorized { bias, .. } => bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for g in &self.layers {
            match g {
                LayerGrad::Dense { weight, bias } => {
                    acc += weight.frobenius_norm_sq() + bias.iter().map(|b| b * b).sum::<f64>();
                }
                LayerGrad::Factorized { left, right, bias } => {
                    acc +=
                        left.frobenius_norm_sq() + right.frobenius_norm_sq() + bias.iter().map(|b| b * b).sum::<f64>();
                }
            }
        }
        acc.sqrt()
    }
}

/// Per-layer values retained by the forward pass for backprop.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input to the layer (`in × batch`).
    pub input: DenseMatrix,
    /// Pre-activation output (`out × batch`).
    pub pre: DenseMatrix,
    /// `R·x` for factorized layers.
    pub mid: Option<DenseMatrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
}

/// Loss, parameter gradients and per-layer pre-activation gradients.
#[derive(Debug, Clone)]
pub struct Backprop {
    pub loss: f64,
    pub grads: GradientSet,
    /// `∂loss/∂z_ℓ` for each layer (`out × batch`).
    pub pre_grads: Vec<DenseMatrix>,
    pub cache: ForwardCache,
}

impl ModelState {
    /// Validates dimension chaining and activation placement.
    pub fn new(input_dim: usize, num_classes: usize, layers: Vec<Layer>) -> Result<Self, ModelError> {
        let model = Self {
            input_dim,
            num_classes,
            layers,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layers.is_empty() {
            return Err(ModelError::NoLayers);
        }
        let last = self.layers.len() - 1;
        let mut expected_in = self.input_dim;
        for (idx, layer) in self.layers.iter().enumerate() {
            if layer.in_dim() != expected_in {
                return Err(ModelError::LayerShape {
                    layer: idx,
                    detail: format!("input dim {} but previous output is {}", layer.in_dim(), expected_in),
                });
            }
            if layer.bias().len() != layer.out_dim() {
                return Err(ModelError::LayerShape {
                    layer: idx,
                    detail: format!("bias length {} vs out dim {}", layer.bias().len(), layer.out_dim()),
                });
            }
            if let Layer::Factorized(f) = layer {
                if f.left.cols() != f.rank || f.right.rows() != f.rank {
                    return Err(ModelError::LayerShape {
                        layer: idx,
                        detail: format!(
                            "factor shapes {:?}/{:?} disagree with rank {}",
                            f.left.shape(),
                            f.right.shape(),
                            f.rank
                        ),
                    });
                }
            }
            let is_last = idx == last;
            if (layer.activation() == Activation::Identity) != is_last {
                return Err(ModelError::Activation { layer: idx });
            }
            expected_in = layer.out_dim();
        }
        if expected_in != self.num_classes {
            return Err(ModelError::LayerShape {
                layer: last,
                detail: format!("output dim {} but model has {} classes", expected_in, self.num_classes),
            });
        }
        Ok(())
    }

    /// He-initialized dense model with the given layer widths
    /// (`widths[0]` is the input dimension, the last entry the class count).
    pub fn init(widths: &[usize], seed: u64) -> Result<Self, ModelError> {
        if widths.len() < 2 {
            return Err(ModelError::NoLayers);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(idx, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let (activation, gain) = if idx == last {
                    (Activation::Identity, 1.0)
                } else {
                    (Activation::Relu, 2.0)
                };
                let std = (gain / fan_in as f64).sqrt();
                Layer::Dense(DenseLayer {
                    weight: DenseMatrix::gaussian(fan_out, fan_in, std, &mut rng),
                    bias: vec![0.0; fan_out],
                    activation,
                })
            })
            .collect();
        Self::new(widths[0], widths[widths.len() - 1], layers)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    fn check_batch(&self, batch: &Batch) -> Result<(), ModelError> {
        if batch.dim() != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: batch.dim(),
            });
        }
        if batch.inputs.cols() != batch.labels.len() {
            return Err(ModelError::BatchSize {
                inputs: batch.inputs.cols(),
                labels: batch.labels.len(),
            });
        }
        if let Some((index, &label)) = batch.labels.iter().enumerate().find(|(_, &l)| l >= self.num_classes) {
            return Err(ModelError::Label {
                index,
                label,
                classes: self.num_classes,
            });
        }
        Ok(())
    }

    /// Logits (`num_classes × batch`) for raw inputs.
    pub fn logits(&self, inputs: &DenseMatrix) -> Result<DenseMatrix, ModelError> {
        if inputs.rows() != self.input_dim {
            return Err(ModelError::InputDim {
                expected: self.input_dim,
                got: inputs.rows(),
            });
        }
        Ok(self.run(inputs).0)
    }

    pub fn forward(&self, batch: &Batch) -> Result<(DenseMatrix, ForwardCache), ModelError> {
        self.check_batch(batch)?;
        Ok(self.run(&batch.inputs))
    }

    fn run(&self, inputs: &DenseMatrix) -> (DenseMatrix, ForwardCache) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = inputs.clone();
        for layer in &self.layers {
            let (pre, mid) = layer.affine(&x);
            let out = layer.activation().apply(&pre);
            caches.push(LayerCache { input: x, pre, mid });
            x = out;
        }
        (x, ForwardCache { layers: caches })
    }

    /// Mean softmax cross-entropy and its exact gradient.
    pub fn loss_and_grads(&self, batch: &Batch) -> Result<(f64, GradientSet), ModelError> {
        let bp = self.backprop(batch)?;
        Ok((bp.loss, bp.grads))
    }

    /// Full backward pass, also exposing pre-activation gradients.
    pub fn backprop(&self, batch: &Batch) -> Result<Backprop, ModelError> {
        let (logits, cache) = self.forward(batch)?;
        let (loss, mut delta) = softmax_cross_entropy(&logits, &batch.labels);

        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut pre_grads = Vec::with_capacity(n);
        for idx in (0..n).rev() {
            let layer = &self.layers[idx];
            let lc = &cache.layers[idx];
            let bias_grad: Vec<f64> = (0..delta.rows()).map(|i| delta.row(i).iter().sum()).collect();
            let (grad, input_grad) = match layer {
                Layer::Dense(d) => {
                    let weight = delta.matmul_t(&lc.input);
                    let input_grad = (idx > 0).then(|| d.weight.t_matmul(&delta));
                    (
                        LayerGrad::Dense {
                            weight,
                            bias: bias_grad,
                        },
                        input_grad,
                    )
                }
                Layer::Factorized(f) => {
                    let mid = lc.mid.as_ref().expect("factorized cache");
                    let left = delta.matmul_t(mid);
                    let mid_grad = f.left.t_matmul(&delta);
                    let right = mid_grad.matmul_t(&lc.input);
                    let input_grad = (idx > 0).then(|| f.right.t_matmul(&mid_grad));
                    (
                        LayerGrad::Factorized {
                            left,
                            right,
                            bias: bias_grad,
                        },
                        input_grad,
                    )
                }
            };
            grads.push(grad);
            pre_grads.push(delta);
            if let Some(mut g) = input_grad {
                let prev = &self.layers[idx - 1];
                prev.activation().backprop(&cache.layers[idx - 1].pre, &mut g);
                delta = g;
            } else {
                break;
            }
        }
        grads.reverse();
        pre_grads.reverse();
        Ok(Backprop {
            loss,
            grads: GradientSet { layers: grads },
            pre_grads,
            cache,
        })
    }

    /// Mean loss and argmax accuracy over a dataset, evaluated in chunks.
    pub fn evaluate(&self, data: &Batch) -> Result<Evaluation, ModelError> {
        self.check_batch(data)?;
        const CHUNK: usize = 1024;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        let n = data.len();
        let mut start = 0;
        while start < n {
            let end = (start + CHUNK).min(n);
            let idx: Vec<usize> = (start..end).collect();
            let chunk = data.select(&idx);
            let (logits, _) = self.run(&chunk.inputs);
            for (j, &label) in chunk.labels.iter().enumerate() {
                let col = logits.col(j);
                loss_sum += sample_loss(&col, label);
                if argmax(&col) == label {
                    correct += 1;
                }
            }
            start = end;
        }
        Ok(Evaluation {
            loss: loss_sum / n as f64,
            accuracy: correct as f64 / n as f64,
        })
    }

    /// Indices of dense layers.
    pub fn dense_layers(&self) -> impl Iterator<Item = (usize, &DenseLayer)> {
        self.layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| l.as_dense().map(|d| (i, d)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sample_loss(logits: &[f64], label: usize) -> f64 {
    log_sum_exp(logits) - logits[label]
}

/// Mean cross-entropy over columns and `∂loss/∂logits`.
fn softmax_cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> (f64, DenseMatrix) {
    let (classes, batch) = logits.shape();
    let inv = 1.0 / batch as f64;
    let mut grad = DenseMatrix::zeros(classes, batch);
    let mut loss = 0.0;
    for (j, &label) in labels.iter().enumerate() {
        let col = logits.col(j);
        let lse = log_sum_exp(&col);
        loss += lse - col[label];
        for (c, &z) in col.iter().enumerate() {
            let p = (z - lse).exp();
            grad[(c, j)] = inv * (p - if c == label { 1.0 } else { 0.0 });
        }
    }
    (loss * inv, grad)
}
