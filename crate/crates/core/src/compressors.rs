//! Closed-form rank-`r` compression of dense layers.
//!
//! All four methods transform the weight into a space where the plain
//! Frobenius norm matches their objective, truncate the SVD there, and map
//! the factors back. With column activations (`y = W·x`) the objectives are
//!
//! | method         | minimized error                    |
//! |----------------|------------------------------------|
//! | `plain_svd`    | `‖W − Ŵ‖_F²`                        |
//! | `whitened_svd` | `‖(W − Ŵ)·X‖_F²`, `X·Xᵀ = S`        |
//! | `gfwsvd`       | `‖G^½·(W − Ŵ)·A^½‖_F²`              |
//! | `fwsvd`        | `‖F^½ ⊙ (W − Ŵ)‖_F²` (row-sum heuristic) |
//!
//! The first three are solved exactly. The Hadamard-weighted FWSVD problem
//! has no closed form; rows are weighted by `dᵢ = √(Σⱼ Fᵢⱼ)` instead.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::LayerCalibration;
use crate::linalg::{svd, symmetric_power, truncate, DenseMatrix, LinalgError, EIGEN_FLOOR};
use crate::model::{Activation, Layer, ModelState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CompressionMethod {
    PlainSvd,
    Fwsvd,
    Gfwsvd,
    WhitenedSvd,
}

impl CompressionMethod {
    pub const ALL: [CompressionMethod; 4] = [
        CompressionMethod::PlainSvd,
        CompressionMethod::Fwsvd,
        CompressionMethod::Gfwsvd,
        CompressionMethod::WhitenedSvd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CompressionMethod::PlainSvd => "plain_svd",
            CompressionMethod::Fwsvd => "fwsvd",
            CompressionMethod::Gfwsvd => "gfwsvd",
            CompressionMethod::WhitenedSvd => "whitened_svd",
        }
    }

    pub fn needs_calibration(self) -> bool {
        self != CompressionMethod::PlainSvd
    }
}

impl fmt::Display for CompressionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CompressionMethod {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown compression method `{s}`"))
    }
}

/// Two-factor replacement for a dense layer: `y = L·(R·x) + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorizedLayer {
    /// `out × r`.
    pub left: DenseMatrix,
    /// `r × in`.
    pub right: DenseMatrix,
    pub bias: Vec<f64>,
    pub rank: usize,
    pub method: CompressionMethod,
    pub activation: Activation,
}

impl FactorizedLayer {
    /// `L·R`; only for analysis, the forward pass never forms it.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.left.matmul(&self.right)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CompressionError {
    #[error("layer {layer}: rank {rank} outside 1..={max}")]
    Rank { layer: usize, rank: usize, max: usize },
    #[error("layer {layer}: {method} needs calibration statistics")]
    MissingCalibration { layer: usize, method: CompressionMethod },
    #[error("layer {layer} is already factorized")]
    AlreadyFactorized { layer: usize },
    #[error("plan covers {plan} layers but the model has {model}")]
    PlanLength { plan: usize, model: usize },
    #[error("compression ratio {0} must lie in (0, 1)")]
    Ratio(f64),
    #[error("layer {layer}: {source}")]
    Linalg { layer: usize, source: LinalgError },
}

/// `max(1, ⌊(1 − ratio)·m·n / (m + n)⌋)`: the largest rank whose factors
/// remove at least `ratio` of the `m·n` weights (except when clamped to 1).
pub fn rank_for_ratio(out_dim: usize, in_dim: usize, ratio: f64) -> Result<usize, CompressionError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CompressionError::Ratio(ratio));
    }
    let budget = (1.0 - ratio) * (out_dim * in_dim) as f64 / (out_dim + in_dim) as f64;
    Ok((budget.floor() as usize).max(1))
}

/// Which layers get compressed, with their target ranks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionPlan {
    pub method: CompressionMethod,
    /// Ratio the ranks were derived from; `None` for explicit ranks.
    pub ratio: Option<f64>,
    /// `Some(r)` for compressed layers, `None` for untouched ones.
    pub ranks: Vec<Option<usize>>,
}

/// Default layer mask: every layer except the classifier head.
pub fn default_layer_mask(model: &ModelState) -> Vec<bool> {
    let n = model.layers.len();
    (0..n).map(|i| i + 1 < n).collect()
}

impl CompressionPlan {
    /// Uniform ratio over the masked layers.
    pub fn for_ratio(
        model: &ModelState,
        method: CompressionMethod,
        ratio: f64,
        mask: &[bool],
    ) -> Result<Self, CompressionError> {
        if mask.len() != model.layers.len() {
            return Err(CompressionError::PlanLength {
                plan: mask.len(),
                model: model.layers.len(),
            });
        }
        let ranks = model
            .layers
            .iter()
            .zip(mask)
            .map(|(l, &on)| on.then(|| rank_for_ratio(l.out_dim(), l.in_dim(), ratio)).transpose())
            .collect::<Result<_, _>>()?;
        Ok(Self {
            method,
            ratio: Some(ratio),
            ranks,
        })
    }

    /// Full-rank factorization of the masked layers (lossless).
    pub fn full_rank(model: &ModelState, method: CompressionMethod, mask: &[bool]) -> Self {
        Self {
            method,
            ratio: None,
            ranks: model
                .layers
                .iter()
                .zip(mask)
                .map(|(l, &on)| on.then(|| l.out_dim().min(l.in_dim())))
                .collect(),
        }
    }

    /// Plan that leaves every layer untouched.
    pub fn empty(model: &ModelState, method: CompressionMethod) -> Self {
        Self {
            method,
            ratio: None,
            ranks: vec![None; model.layers.len()],
        }
    }

    /// Parameter count after applying the plan to `model`.
    pub fn compressed_param_count(&self, model: &ModelState) -> usize {
        model
            .layers
            .iter()
            .zip(&self.ranks)
            .map(|(l, r)| match r {
                Some(r) => r * (l.out_dim() + l.in_dim()) + l.bias().len(),
                None => l.param_count(),
            })
            .sum()
    }
}

/// Rank-`r` factorization of one dense weight.
pub fn compress_layer(
    weight: &DenseMatrix,
    bias: &[f64],
    activation: Activation,
    method: CompressionMethod,
    calib: Option<&LayerCalibration>,
    rank: usize,
) -> Result<FactorizedLayer, CompressionError> {
    compress_layer_at(0, weight, bias, activation, method, calib, rank)
}

fn compress_layer_at(
    layer: usize,
    weight: &DenseMatrix,
    bias: &[f64],
    activation: Activation,
    method: CompressionMethod,
    calib: Option<&LayerCalibration>,
    rank: usize,
) -> Result<FactorizedLayer, CompressionError> {
    let max = weight.rows().min(weight.cols());
    if rank == 0 || rank > max {
        return Err(CompressionError::Rank { layer, rank, max });
    }
    let calib = match (method.needs_calibration(), calib) {
        (true, None) => return Err(CompressionError::MissingCalibration { layer, method }),
        (_, c) => c,
    };
    let wrap = |source| CompressionError::Linalg { layer, source };
    let factors = |m: &DenseMatrix| -> Result<(DenseMatrix, DenseMatrix), LinalgError> {
        let t = truncate(&svd(m)?, rank)?;
        Ok((t.u.scale_cols(&t.sigma), t.v.transpose()))
    };
    let (left, right) = match method {
        CompressionMethod::PlainSvd => factors(weight).map_err(wrap)?,
        CompressionMethod::WhitenedSvd => {
            let c = calib.expect("checked");
            let m = weight.try_matmul(&c.whitening_x).map_err(wrap)?;
            let (l, r) = factors(&m).map_err(wrap)?;
            (l, r.matmul(&c.whitening_x_inv))
        }
        CompressionMethod::Gfwsvd => {
            let c = calib.expect("checked");
            let (g_half, g_inv_half, a_half, a_inv_half) = kfac_roots(c).map_err(wrap)?;
            let m = g_half
                .try_matmul(weight)
                .and_then(|gw| gw.try_matmul(&a_half))
                .map_err(wrap)?;
            let (l, r) = factors(&m).map_err(wrap)?;
            (g_inv_half.matmul(&l), r.matmul(&a_inv_half))
        }
        CompressionMethod::Fwsvd => {
            let c = calib.expect("checked");
            let d = row_importance(&c.fisher_diag);
            let (l, r) = factors(&weight.scale_rows(&d)).map_err(wrap)?;
            let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
            (l.scale_rows(&inv), r)
        }
    };
    Ok(FactorizedLayer {
        left,
        right,
        bias: bias.to_vec(),
        rank,
        method,
        activation,
    })
}

fn kfac_roots(c: &LayerCalibration) -> Result<(DenseMatrix, DenseMatrix, DenseMatrix, DenseMatrix), LinalgError> {
    Ok((
        symmetric_power(&c.kfac_g, 0.5, EIGEN_FLOOR)?,
        symmetric_power(&c.kfac_g, -0.5, EIGEN_FLOOR)?,
        symmetric_power(&c.kfac_a, 0.5, EIGEN_FLOOR)?,
        symmetric_power(&c.kfac_a, -0.5, EIGEN_FLOOR)?,
    ))
}

/// `dᵢ = √(Σⱼ Fᵢⱼ + δ)` with `δ = 1e-6 × mean row sum` (floored at 1e-12).
pub fn row_importance(fisher: &DenseMatrix) -> Vec<f64> {
    let sums: Vec<f64> = (0..fisher.rows()).map(|i| fisher.row(i).iter().sum()).collect();
    let mean = sums.iter().sum::<f64>() / sums.len() as f64;
    let damping = (1e-6 * mean).max(1e-12);
    sums.iter().map(|s| (s + damping).sqrt()).collect()
}

/// Replaces the planned layers of `model` with factorized layers.
pub fn compress_model(
    model: &ModelState,
    plan: &CompressionPlan,
    calibs: Option<&[LayerCalibration]>,
) -> Result<ModelState, CompressionError> {
    if plan.ranks.len() != model.layers.len() {
        return Err(CompressionError::PlanLength {
            plan: plan.ranks.len(),
            model: model.layers.len(),
        });
    }
    let layers = model
        .layers
        .iter()
        .zip(&plan.ranks)
        .enumerate()
        .map(|(idx, (layer, rank))| match (layer, rank) {
            (_, None) => Ok(layer.clone()),
            (Layer::Factorized(_), Some(_)) => Err(CompressionError::AlreadyFactorized { layer: idx }),
            (Layer::Dense(d), Some(r)) => {
                let calib = calibs.and_then(|c| c.get(idx));
                compress_layer_at(idx, &d.weight, &d.bias, d.activation, plan.method, calib, *r).map(Layer::Factorized)
            }
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ModelState {
        input_dim: model.input_dim,
        num_classes: model.num_classes,
        layers,
    })
}

/// `‖W − Ŵ‖_F²`.
pub fn frobenius_error(w: &DenseMatrix, w_hat: &DenseMatrix) -> f64 {
    w.sub(w_hat).frobenius_norm_sq()
}

/// `‖F^½ ⊙ (W − Ŵ)‖_F² = Σ Fᵢⱼ (W − Ŵ)ᵢⱼ²`.
pub fn fisher_weighted_error(w: &DenseMatrix, w_hat: &DenseMatrix, fisher: &DenseMatrix) -> f64 {
    let d = w.sub(w_hat);
    d.hadamard(&d).inner(fisher)
}

/// `‖(W − Ŵ)·X‖_F²`.
pub fn whitened_error(w: &DenseMatrix, w_hat: &DenseMatrix, x: &DenseMatrix) -> f64 {
    w.sub(w_hat).matmul(x).frobenius_norm_sq()
}

/// `‖G^½·(W − Ŵ)·A^½‖_F² = tr(Δᵀ G Δ A)`.
pub fn kfac_weighted_error(w: &DenseMatrix, w_hat: &DenseMatrix, a: &DenseMatrix, g: &DenseMatrix) -> f64 {
    let d = w.sub(w_hat);
    g.matmul(&d).inner(&d.matmul(a))
}
