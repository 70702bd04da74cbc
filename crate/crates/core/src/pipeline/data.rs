//! Planted-teacher classification data.
//!
//! A teacher network with low-rank weight matrices labels standard Gaussian
//! inputs by argmax. Output biases are tuned so classes come out balanced;
//! teachers that cannot be balanced to within 10% of uniform are redrawn.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::linalg::DenseMatrix;
use crate::model::{argmax, Activation, Batch, DenseLayer, Layer, ModelState};

use super::PipelineError;

const BALANCE_ATTEMPTS: usize = 100;
const BALANCE_ITERATIONS: usize = 400;
const BALANCE_TOLERANCE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    /// Hidden widths of the teacher.
    pub teacher_hidden: Vec<usize>,
    /// Rank of every teacher weight (capped by its dimensions).
    pub planted_rank: usize,
    pub train_samples: usize,
    pub calibration_samples: usize,
    pub test_samples: usize,
    /// Size of a dedicated rehab split; `0` means rehab reuses `train`.
    pub rehab_samples: usize,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            input_dim: 64,
            num_classes: 4,
            teacher_hidden: vec![32],
            planted_rank: 4,
            train_samples: 4096,
            calibration_samples: 512,
            test_samples: 2048,
            rehab_samples: 0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |msg: &str| Err(PipelineError::Config(format!("dataset: {msg}")));
        if self.input_dim == 0 {
            return bad("input_dim must be >= 1");
        }
        if self.num_classes < 2 {
            return bad("num_classes must be >= 2");
        }
        if self.planted_rank == 0 {
            return bad("planted_rank must be >= 1");
        }
        if self.teacher_hidden.contains(&0) {
            return bad("teacher widths must be >= 1");
        }
        if self.train_samples < self.num_classes || self.calibration_samples == 0 || self.test_samples == 0 {
            return bad("every split needs samples and train needs at least one per class");
        }
        Ok(())
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_dim];
        w.extend(&self.teacher_hidden);
        w.push(self.num_classes);
        w
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedDataset {
    pub spec: DatasetSpec,
    pub teacher: ModelState,
    /// Resampling attempts used before the teacher balanced.
    pub attempts: usize,
    pub train: Batch,
    pub calibration: Batch,
    pub test: Batch,
    /// Present only when `spec.rehab_samples > 0`.
    pub rehab: Option<Batch>,
}

impl PlantedDataset {
    /// Data used for rehab fine-tuning.
    pub fn rehab_split(&self) -> &Batch {
        self.rehab.as_ref().unwrap_or(&self.train)
    }
}

/// Samples with `x ~ N(0, I)` and teacher-argmax labels, deterministic per
/// `spec.seed`. Splits come from one stream in the order train, calibration,
/// test. The optional rehab split is drawn afterwards, so enabling it leaves
/// the other splits unchanged.
pub fn gen_dataset(spec: &DatasetSpec) -> Result<PlantedDataset, PipelineError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let total = spec.train_samples + spec.calibration_samples + spec.test_samples;
    for attempt in 1..=BALANCE_ATTEMPTS {
        let mut teacher = draw_teacher(spec, &mut rng)?;
        let inputs = DenseMatrix::gaussian(spec.input_dim, total, 1.0, &mut rng);
        let logits = teacher.logits(&inputs)?;
        let Some(bias) = balance(&logits) else { continue };
        if let Some(Layer::Dense(head)) = teacher.layers.last_mut() {
            head.bias = bias.clone();
        }
        let labels: Vec<usize> = (0..total)
            .map(|j| {
                let col: Vec<f64> = logits.col(j).iter().zip(&bias).map(|(l, b)| l + b).collect();
                argmax(&col)
            })
            .collect();
        let all = Batch::new(inputs, labels)?;
        let split = |start: usize, len: usize| all.select(&(start..start + len).collect::<Vec<_>>());
        let rehab = if spec.rehab_samples > 0 {
            let inputs = DenseMatrix::gaussian(spec.input_dim, spec.rehab_samples, 1.0, &mut rng);
            let logits = teacher.logits(&inputs)?;
            let labels = (0..spec.rehab_samples).map(|j| argmax(&logits.col(j))).collect();
            Some(Batch::new(inputs, labels)?)
        } else {
            None
        };
        return Ok(PlantedDataset {
            spec: spec.clone(),
            teacher,
            attempts: attempt,
            train: split(0, spec.train_samples),
            calibration: split(spec.train_samples, spec.calibration_samples),
            test: split(spec.train_samples + spec.calibration_samples, spec.test_samples),
            rehab,
        });
    }
    Err(PipelineError::Unbalanced {
        attempts: BALANCE_ATTEMPTS,
    })
}

fn draw_teacher(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Result<ModelState, PipelineError> {
    let widths = spec.widths();
    let last = widths.len() - 2;
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(idx, w)| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let r = spec.planted_rank.min(fan_in).min(fan_out);
            // Var(Wᵢⱼ) = 2/fan_in keeps activations O(1) through the ReLUs.
            let std = (2.0 / (fan_in as f64 * r as f64)).sqrt().sqrt();
            let a = DenseMatrix::gaussian(fan_out, r, std, rng);
            let b = DenseMatrix::gaussian(r, fan_in, std, rng);
            let activation = if idx == last {
                Activation::Identity
            } else {
                Activation::Relu
            };
            Layer::Dense(DenseLayer {
                weight: a.matmul(&b),
                bias: vec![0.0; fan_out],
                activation,
            })
        })
        .collect();
    Ok(ModelState::new(spec.input_dim, spec.num_classes, layers)?)
}

/// Output bias making argmax classes near-uniform, or `None` when some
/// class stays outside `(1 ± 10%)/K`.
fn balance(logits: &DenseMatrix) -> Option<Vec<f64>> {
    let (k, n) = logits.shape();
    let scale = (logits.frobenius_norm_sq() / (k * n) as f64).sqrt().max(1e-12);
    let mut bias: Vec<f64> = (0..k).map(|c| -logits.row(c).iter().sum::<f64>() / n as f64).collect();
    let target = 1.0 / k as f64;
    let frequencies = |bias: &[f64]| {
        let mut counts = vec![0usize; k];
        for j in 0..n {
            let col: Vec<f64> = (0..k).map(|c| logits[(c, j)] + bias[c]).collect();
            counts[argmax(&col)] += 1;
        }
        counts.into_iter().map(|c| c as f64 / n as f64).collect::<Vec<_>>()
    };
    for it in 0..BALANCE_ITERATIONS {
        let freq = frequencies(&bias);
        if freq
            .iter()
            .all(|f| (f - target).abs() <= 0.25 * BALANCE_TOLERANCE * target)
        {
            break;
        }
        let step = scale / (1.0 + it as f64 / 50.0);
        for c in 0..k {
            bias[c] -= step * (freq[c] - target);
        }
    }
    let freq = frequencies(&bias);
    freq.iter()
        .all(|f| (f - target).abs() <= BALANCE_TOLERANCE * target)
        .then_some(bias)
}
