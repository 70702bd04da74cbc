//! Post-compression fine-tuning of factorized layers.
//!
//! Each round trains the left factors (right frozen), then the right
//! factors (left frozen). In LoRA mode the trained factor stays fixed and an
//! adapter `s·up·down` is learned on top of it and merged when the phase
//! ends. A factor whose smaller side does not exceed the adapter rank is
//! trained directly instead. Biases and dense layers never move.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, AdamWConfig, BatchOrder, OptimizerState, ParamSlot, StepMetrics, TrainError};
use crate::compressors::FactorizedLayer;
use crate::linalg::DenseMatrix;
use crate::model::{Batch, Layer, LayerGrad, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RehabMode {
    Lora,
    Direct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RehabPhase {
    Left,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RehabConfig {
    pub steps_per_factor: usize,
    /// Number of left-then-right alternations.
    pub rounds: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub mode: RehabMode,
    pub lora_rank: usize,
    pub lora_scale: f64,
    pub seed: u64,
}

impl Default for RehabConfig {
    fn default() -> Self {
        Self {
            steps_per_factor: 100,
            rounds: 1,
            batch_size: 64,
            optimizer: AdamWConfig::default(),
            mode: RehabMode::Lora,
            lora_rank: 10,
            lora_scale: 1.0,
            seed: 0,
        }
    }
}

/// Additive correction `scale·up·down` to a `rows × cols` host matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    /// `rank × cols`, Gaussian with variance `1/cols`.
    pub down: DenseMatrix,
    /// `rows × rank`, zero so the adapter starts as a no-op.
    pub up: DenseMatrix,
    pub scale: f64,
}

impl LoraAdapter {
    pub fn new(rows: usize, cols: usize, rank: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        Self {
            down: DenseMatrix::gaussian(rank, cols, (1.0 / cols as f64).sqrt(), rng),
            up: DenseMatrix::zeros(rows, rank),
            scale,
        }
    }

    pub fn delta(&self) -> DenseMatrix {
        self.up.matmul(&self.down).scale(self.scale)
    }

    /// `(∂/∂up, ∂/∂down)` from the gradient `g` w.r.t. the adapted matrix.
    pub fn grads(&self, g: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
        (
            g.matmul_t(&self.down).scale(self.scale),
            self.up.t_matmul(g).scale(self.scale),
        )
    }
}

#[derive(Debug, Clone)]
pub struct RehabOutcome {
    pub model: ModelState,
    pub metrics: Vec<StepMetrics>,
    /// Mode used for each `(layer, phase)` trained.
    pub modes: Vec<(usize, RehabPhase, RehabMode)>,
}

fn factor(f: &FactorizedLayer, phase: RehabPhase) -> &DenseMatrix {
    match phase {
        RehabPhase::Left => &f.left,
        RehabPhase::Right => &f.right,
    }
}

fn factor_mut(f: &mut FactorizedLayer, phase: RehabPhase) -> &mut DenseMatrix {
    match phase {
        RehabPhase::Left => &mut f.left,
        RehabPhase::Right => &mut f.right,
    }
}

fn factor_grad(g: &LayerGrad, phase: RehabPhase) -> &DenseMatrix {
    match (g, phase) {
        (LayerGrad::Factorized { left, .. }, RehabPhase::Left) => left,
        (LayerGrad::Factorized { right, .. }, RehabPhase::Right) => right,
        (LayerGrad::Dense { .. }, _) => unreachable!("dense layers are not rehab targets"),
    }
}

pub fn rehab(model: &ModelState, data: &Batch, config: &RehabConfig) -> Result<RehabOutcome, TrainError> {
    if !model.layers.iter().any(|l| matches!(l, Layer::Factorized(_))) {
        return Err(TrainError::NothingToRehab);
    }
    if config.mode == RehabMode::Lora && config.lora_rank == 0 {
        return Err(TrainError::Config("lora_rank must be >= 1".into()));
    }
    let mut model = model.clone();
    let mut metrics = Vec::new();
    let mut modes = Vec::new();
    if config.steps_per_factor == 0 || config.rounds == 0 {
        return Ok(RehabOutcome { model, metrics, modes });
    }
    let mut order = BatchOrder::new(data.len(), config.batch_size, config.seed)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(config.seed);
    init_rng.set_stream(1);
    let start = Instant::now();
    let mut step = 0;
    for _ in 0..config.rounds {
        for phase in [RehabPhase::Left, RehabPhase::Right] {
            // Adapter per factorized layer in LoRA mode, `None` for direct.
            let mut adapters: Vec<Option<Option<LoraAdapter>>> = model
                .layers
                .iter()
                .enumerate()
                .map(|(idx, layer)| {
                    let Layer::Factorized(f) = layer else { return None };
                    let (rows, cols) = factor(f, phase).shape();
                    let lora = config.mode == RehabMode::Lora && config.lora_rank < rows.min(cols);
                    let mode = if lora { RehabMode::Lora } else { RehabMode::Direct };
                    modes.push((idx, phase, mode));
                    Some(lora.then(|| LoraAdapter::new(rows, cols, config.lora_rank, config.lora_scale, &mut init_rng)))
                })
                .collect();
            let sizes: Vec<usize> = slots(&mut model, &mut adapters, phase)
                .iter()
                .map(|s| s.values.len())
                .collect();
            let mut state = OptimizerState::new(config.optimizer, sizes);
            for _ in 0..config.steps_per_factor {
                let batch = data.select(order.next_indices());
                let working = adapted(&model, &adapters, phase);
                let (loss, grads) = working.loss_and_grads(&batch)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { step, loss });
                }
                let mut owned: Vec<DenseMatrix> = Vec::new();
                for (g, adapter) in grads.layers.iter().zip(&adapters) {
                    match adapter {
                        None => {}
                        Some(None) => owned.push(factor_grad(g, phase).clone()),
                        Some(Some(a)) => {
                            let (up, down) = a.grads(factor_grad(g, phase));
                            owned.push(down);
                            owned.push(up);
                        }
                    }
                }
                let grad_refs: Vec<&[f64]> = owned.iter().map(DenseMatrix::data).collect();
                adamw_step(&mut slots(&mut model, &mut adapters, phase), &grad_refs, &mut state);
                metrics.push(StepMetrics {
                    step,
                    task_loss: loss,
                    surrogate_value: None,
                    stable_ranks: Vec::new(),
                    degenerate_layers: 0,
                    learning_rate: config.optimizer.learning_rate,
                    elapsed_secs: start.elapsed().as_secs_f64(),
                });
                step += 1;
            }
            model = adapted(&model, &adapters, phase);
        }
    }
    Ok(RehabOutcome { model, metrics, modes })
}

/// Trainable tensors for one phase, in layer order: the factor itself
/// (direct) or `down, up` (LoRA).
fn slots<'a>(
    model: &'a mut ModelState,
    adapters: &'a mut [Option<Option<LoraAdapter>>],
    phase: RehabPhase,
) -> Vec<ParamSlot<'a>> {
    let mut out = Vec::new();
    for (layer, adapter) in model.layers.iter_mut().zip(adapters.iter_mut()) {
        match (layer, adapter) {
            (Layer::Factorized(f), Some(None)) => out.push(ParamSlot {
                values: factor_mut(f, phase).data_mut(),
                decay: true,
            }),
            (_, Some(Some(a))) => {
                out.push(ParamSlot {
                    values: a.down.data_mut(),
                    decay: true,
                });
                out.push(ParamSlot {
                    values: a.up.data_mut(),
                    decay: true,
                });
            }
            _ => {}
        }
    }
    out
}

/// Model with every adapter folded into its host factor.
fn adapted(model: &ModelState, adapters: &[Option<Option<LoraAdapter>>], phase: RehabPhase) -> ModelState {
    let mut out = model.clone();
    for (layer, adapter) in out.layers.iter_mut().zip(adapters) {
        if let (Layer::Factorized(f), Some(Some(a))) = (layer, adapter) {
            factor_mut(f, phase).axpy(1.0, &a.delta());
        }
    }
    out
}
