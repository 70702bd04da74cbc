//! Optimization loops: base training, prehab and rehab.
//!
//! Base training and prehab share one loop. Prehab adds `λ_ℓ·∇R(W_ℓ·X_ℓ)`
//! to the task gradient of every regularized weight, with the whitening
//! factors `X_ℓ` frozen for the whole run. Layers whose effective `λ_ℓ` is
//! zero never touch the surrogate, so `λ = 0` retraces base training bit for
//! bit under the same seed.

mod adamw;
mod rehab;

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calibration::LayerCalibration;
use crate::linalg::{DenseMatrix, LinalgError};
use crate::model::{Batch, GradientSet, Layer, LayerGrad, ModelError, ModelState};
use crate::surrogates::{self, SurrogateKind};

pub use adamw::{adamw_step, AdamWConfig, OptimizerState, ParamSlot};
pub use rehab::{rehab, LoraAdapter, RehabConfig, RehabMode, RehabOutcome, RehabPhase};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("loss diverged to {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("batch size {batch_size} exceeds the {samples} available samples")]
    BatchSize { batch_size: usize, samples: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("layer {layer} cannot be regularized: {reason}")]
    Regularizer { layer: usize, reason: String },
    #[error("model has no factorized layer to fine-tune")]
    NothingToRehab,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("layer {layer}: {source}")]
    Surrogate { layer: usize, source: LinalgError },
    #[error("metrics log: {0}")]
    Io(#[from] std::io::Error),
}

/// Training length in optimizer steps or in full passes over the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Budget {
    Steps(usize),
    Epochs(usize),
}

impl Budget {
    /// Optimizer steps for `samples` examples; incomplete batches are dropped.
    pub fn steps(self, samples: usize, batch_size: usize) -> usize {
        match self {
            Budget::Steps(s) => s,
            Budget::Epochs(e) => e * (samples / batch_size.max(1)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub budget: Budget,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: Budget::Steps(2000),
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PrehabConfig {
    pub lambda: f64,
    /// Per-layer `λ_ℓ`; entries override `lambda` for the matching layer.
    pub layer_lambdas: Vec<Option<f64>>,
    pub surrogate: SurrogateKind,
    pub budget: Budget,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Regularize `W·X` (true) or the raw weight `W` (false).
    pub whitened: bool,
    /// Regularized layers; `None` means every layer except the head.
    pub layers: Option<Vec<usize>>,
}

impl Default for PrehabConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            layer_lambdas: Vec::new(),
            surrogate: SurrogateKind::StableRank,
            budget: Budget::Steps(500),
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 0,
            whitened: true,
            layers: None,
        }
    }
}

impl PrehabConfig {
    /// Base-training config that walks the same batches with the same optimizer.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            budget: self.budget,
            batch_size: self.batch_size,
            optimizer: AdamWConfig {
                learning_rate: self.learning_rate,
                ..AdamWConfig::default()
            },
            seed: self.seed,
        }
    }

    /// Effective `λ_ℓ` for every layer of a model with `n` layers.
    pub fn lambdas(&self, n: usize) -> Result<Vec<f64>, TrainError> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(TrainError::Config(format!(
                "lambda {} must be finite and >= 0",
                self.lambda
            )));
        }
        if self.layer_lambdas.len() > n {
            return Err(TrainError::Config(format!(
                "{} per-layer lambdas for {n} layers",
                self.layer_lambdas.len()
            )));
        }
        let active: Vec<bool> = match &self.layers {
            None => (0..n).map(|i| i + 1 < n).collect(),
            Some(list) => {
                let mut mask = vec![false; n];
                for &i in list {
                    *mask
                        .get_mut(i)
                        .ok_or_else(|| TrainError::Config(format!("layer {i} out of range")))? = true;
                }
                mask
            }
        };
        (0..n)
            .map(|i| {
                let l = self.layer_lambdas.get(i).copied().flatten().unwrap_or(self.lambda);
                if !(l >= 0.0 && l.is_finite()) {
                    return Err(TrainError::Config(format!(
                        "layer {i} lambda {l} must be finite and >= 0"
                    )));
                }
                Ok(if active[i] { l } else { 0.0 })
            })
            .collect()
    }
}

/// One line of the per-step JSONL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub task_loss: f64,
    /// `Σ_ℓ R(W_ℓ·X_ℓ)` over regularized layers; `None` without a surrogate.
    pub surrogate_value: Option<f64>,
    /// `(layer, stable rank of W_ℓ·X_ℓ)` for regularized layers.
    pub stable_ranks: Vec<(usize, f64)>,
    pub degenerate_layers: usize,
    pub learning_rate: f64,
    pub elapsed_secs: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelState,
    pub metrics: Vec<StepMetrics>,
}

pub fn write_metrics_jsonl(path: &Path, metrics: &[StepMetrics]) -> Result<(), TrainError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut out, m).map_err(std::io::Error::from)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Seeded per-epoch shuffle yielding full batches only.
pub(crate) struct BatchOrder {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
    batch_size: usize,
}

impl BatchOrder {
    pub(crate) fn new(samples: usize, batch_size: usize, seed: u64) -> Result<Self, TrainError> {
        if batch_size == 0 || batch_size > samples {
            return Err(TrainError::BatchSize { batch_size, samples });
        }
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            order: (0..samples).collect(),
            pos: samples,
            batch_size,
        })
    }

    pub(crate) fn next_indices(&mut self) -> &[usize] {
        if self.pos + self.batch_size > self.order.len() {
            self.order.sort_unstable();
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let start = self.pos;
        self.pos += self.batch_size;
        &self.order[start..self.pos]
    }
}

/// Flattened trainable tensors in layer order: `W, b` or `L, R, b`.
pub(crate) fn param_slots(model: &mut ModelState) -> Vec<ParamSlot<'_>> {
    let mut slots = Vec::new();
    for layer in &mut model.layers {
        match layer {
            Layer::Dense(d) => {
                slots.push(ParamSlot {
                    values: d.weight.data_mut(),
                    decay: true,
                });
                slots.push(ParamSlot {
                    values: &mut d.bias,
                    decay: false,
                });
            }
            Layer::Factorized(f) => {
                slots.push(ParamSlot {
                    values: f.left.data_mut(),
                    decay: true,
                });
                slots.push(ParamSlot {
                    values: f.right.data_mut(),
                    decay: true,
                });
                slots.push(ParamSlot {
                    values: &mut f.bias,
                    decay: false,
                });
            }
        }
    }
    slots
}

pub(crate) fn grad_slots(grads: &GradientSet) -> Vec<&[f64]> {
    let mut slots = Vec::new();
    for g in &grads.layers {
        match g {
            LayerGrad::Dense { weight, bias } => {
                slots.push(weight.data());
                slots.push(bias.as_slice());
            }
            LayerGrad::Factorized { left, right, bias } => {
                slots.push(left.data());
                slots.push(right.data());
                slots.push(bias.as_slice());
            }
        }
    }
    slots
}

struct Regularizer<'a> {
    kind: SurrogateKind,
    /// `(layer, λ_ℓ, X_ℓ)` for every layer with `λ_ℓ > 0`.
    terms: Vec<(usize, f64, &'a DenseMatrix)>,
}

/// Plain task-loss training.
pub fn train_base(model: &ModelState, data: &Batch, config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    fit(model, data, config, None)
}

/// Task loss plus `λ_ℓ·R(W_ℓ·X_ℓ)` with the whitening factors held fixed.
pub fn prehab(
    model: &ModelState,
    data: &Batch,
    calibs: &[LayerCalibration],
    config: &PrehabConfig,
) -> Result<TrainOutcome, TrainError> {
    let lambdas = config.lambdas(model.layers.len())?;
    let mut terms = Vec::new();
    let identities: Vec<Option<DenseMatrix>> = model
        .layers
        .iter()
        .map(|l| (!config.whitened).then(|| DenseMatrix::identity(l.in_dim())))
        .collect();
    for (idx, &lambda) in lambdas.iter().enumerate() {
        if lambda == 0.0 {
            continue;
        }
        if model.layers[idx].as_dense().is_none() {
            return Err(TrainError::Regularizer {
                layer: idx,
                reason: "only dense layers carry a surrogate".into(),
            });
        }
        let x = match &identities[idx] {
            Some(eye) => eye,
            None => {
                &calibs
                    .get(idx)
                    .ok_or_else(|| TrainError::Regularizer {
                        layer: idx,
                        reason: "no calibration statistics".into(),
                    })?
                    .whitening_x
            }
        };
        terms.push((idx, lambda, x));
    }
    let reg = (!terms.is_empty()).then_some(Regularizer {
        kind: config.surrogate,
        terms,
    });
    fit(model, data, &config.train_config(), reg.as_ref())
}

fn fit(
    model: &ModelState,
    data: &Batch,
    config: &TrainConfig,
    reg: Option<&Regularizer<'_>>,
) -> Result<TrainOutcome, TrainError> {
    let steps = config.budget.steps(data.len(), config.batch_size);
    let mut model = model.clone();
    let mut metrics = Vec::with_capacity(steps);
    if steps == 0 {
        return Ok(TrainOutcome { model, metrics });
    }
    let mut order = BatchOrder::new(data.len(), config.batch_size, config.seed)?;
    let sizes: Vec<usize> = param_slots(&mut model).iter().map(|s| s.values.len()).collect();
    let mut state = OptimizerState::new(config.optimizer, sizes);
    let start = Instant::now();
    for step in 0..steps {
        let batch = data.select(order.next_indices());
        let (loss, mut grads) = model.loss_and_grads(&batch)?;
        if !loss.is_finite() {
            return Err(TrainError::Diverged { step, loss });
        }
        let mut surrogate_value = None;
        let mut stable_ranks = Vec::new();
        let mut degenerate_layers = 0;
        if let Some(reg) = reg {
            let mut total = 0.0;
            for &(idx, lambda, x) in &reg.terms {
                let w = &model.layers[idx].as_dense().expect("checked dense").weight;
                let eval = surrogates::evaluate(reg.kind, w, x)
                    .map_err(|source| TrainError::Surrogate { layer: idx, source })?;
                total += eval.value;
                stable_ranks.push((idx, eval.stable_rank));
                degenerate_layers += usize::from(eval.degenerate);
                if let LayerGrad::Dense { weight, .. } = &mut grads.layers[idx] {
                    weight.axpy(lambda, &eval.grad);
                }
            }
            surrogate_value = Some(total);
        }
        let grad_refs = grad_slots(&grads);
        adamw_step(&mut param_slots(&mut model), &grad_refs, &mut state);
        metrics.push(StepMetrics {
            step,
            task_loss: loss,
            surrogate_value,
            stable_ranks,
            degenerate_layers,
            learning_rate: config.optimizer.learning_rate,
            elapsed_secs: start.elapsed().as_secs_f64(),
        });
    }
    if !model.layers.iter().all(|l| l.effective_weight().is_finite()) {
        return Err(TrainError::Diverged {
            step: steps,
            loss: f64::NAN,
        });
    }
    Ok(TrainOutcome { model, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Batch {
        let inputs = DenseMatrix::from_fn(2, 64, |i, j| {
            let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
            if i == 0 {
                sign * (1.0 + (j as f64) * 0.01)
            } else {
                ((j * 7) % 11) as f64 / 11.0 - 0.5
            }
        });
        let labels = (0..64).map(|j| j % 2).collect();
        Batch::new(inputs, labels).unwrap()
    }

    #[test]
    fn batch_order_covers_each_epoch() {
        let mut order = BatchOrder::new(10, 3, 5).unwrap();
        let mut seen: Vec<usize> = (0..3).flat_map(|_| order.next_indices().to_vec()).collect();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 9);
        assert!(BatchOrder::new(3, 4, 0).is_err());
    }

    #[test]
    fn zero_steps_is_identity() {
        let model = ModelState::init(&[2, 4, 2], 1).unwrap();
        let config = TrainConfig {
            budget: Budget::Steps(0),
            ..TrainConfig::default()
        };
        assert_eq!(train_base(&model, &toy(), &config).unwrap().model, model);
    }

    #[test]
    fn separable_toy_is_learned() {
        let model = ModelState::init(&[2, 8, 2], 3).unwrap();
        let config = TrainConfig {
            budget: Budget::Steps(200),
            batch_size: 16,
            optimizer: AdamWConfig {
                learning_rate: 0.05,
                ..AdamWConfig::default()
            },
            seed: 0,
        };
        let out = train_base(&model, &toy(), &config).unwrap();
        assert_eq!(out.model.evaluate(&toy()).unwrap().accuracy, 1.0);
        assert_eq!(out.metrics.len(), 200);
    }

    #[test]
    fn epochs_budget_counts_full_batches() {
        assert_eq!(Budget::Epochs(3).steps(100, 32), 9);
        assert_eq!(Budget::Steps(7).steps(100, 32), 7);
    }

    #[test]
    fn lambda_resolution() {
        let config = PrehabConfig {
            layer_lambdas: vec![None, Some(0.5)],
            ..PrehabConfig::default()
        };
        assert_eq!(config.lambdas(3).unwrap(), vec![0.1, 0.5, 0.0]);
        let negative = PrehabConfig {
            lambda: -1.0,
            ..PrehabConfig::default()
        };
        assert!(negative.lambdas(3).is_err());
    }
}
