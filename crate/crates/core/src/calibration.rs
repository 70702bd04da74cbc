//! Per-layer statistics estimated once from a calibration split.
//!
//! For every layer ℓ with input `a` and pre-activation gradient `g = ∂ℓ/∂z`
//! (per sample, true labels):
//!
//! * `S = mean(a aᵀ)`: uncentered input covariance, also the K-FAC `A`;
//! * `G = mean(g gᵀ)`: K-FAC output-gradient factor;
//! * `F[i,j] = mean((g_i a_j)²)`: empirical diagonal Fisher of `W`.
//!
//! Whitening uses the Cholesky factor `X` of the damped covariance, so
//! `‖Δ·X‖_F² = E‖Δ·a‖²` for any weight perturbation `Δ`.

use serde::{Deserialize, Serialize};

use crate::linalg::{cholesky, default_damping, invert_lower_triangular, DenseMatrix, LinalgError};
use crate::model::{Batch, ModelError, ModelState};

/// K-FAC damping as a fraction of the factor's mean diagonal.
pub const KFAC_DAMPING: f64 = 1e-4;

const DAMPING_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCalibration {
    /// Lower-triangular Cholesky factor of the damped input covariance.
    pub whitening_x: DenseMatrix,
    pub whitening_x_inv: DenseMatrix,
    /// Same shape as the layer weight, entrywise non-negative.
    pub fisher_diag: DenseMatrix,
    /// Damped input factor (`in × in`).
    pub kfac_a: DenseMatrix,
    /// Damped output-gradient factor (`out × out`).
    pub kfac_g: DenseMatrix,
    pub sample_count: usize,
}

/// Raw accumulated statistics for one layer, before damping.
#[derive(Debug, Clone)]
pub struct LayerStats {
    pub covariance: DenseMatrix,
    pub grad_covariance: DenseMatrix,
    pub fisher_diag: DenseMatrix,
}

#[derive(Debug, thiserror::Error)]
pub enum CalibrationError {
    #[error("calibration set is empty")]
    Empty,
    #[error("layer {layer}: {source}")]
    Layer { layer: usize, source: LinalgError },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Accumulates per-sample statistics (batch size one) in dataset order.
pub fn collect_stats(model: &ModelState, calib: &Batch) -> Result<Vec<LayerStats>, CalibrationError> {
    if calib.is_empty() {
        return Err(CalibrationError::Empty);
    }
    let mut stats: Vec<LayerStats> = model
        .layers
        .iter()
        .map(|l| LayerStats {
            covariance: DenseMatrix::zeros(l.in_dim(), l.in_dim()),
            grad_covariance: DenseMatrix::zeros(l.out_dim(), l.out_dim()),
            fisher_diag: DenseMatrix::zeros(l.out_dim(), l.in_dim()),
        })
        .collect();
    for s in 0..calib.len() {
        let bp = model.backprop(&calib.sample(s))?;
        for (idx, st) in stats.iter_mut().enumerate() {
            let a = bp.cache.layers[idx].input.data();
            let g = bp.pre_grads[idx].data();
            accumulate_outer(&mut st.covariance, a, a);
            accumulate_outer(&mut st.grad_covariance, g, g);
            let f = st.fisher_diag.data_mut();
            for (i, &gi) in g.iter().enumerate() {
                let row = &mut f[i * a.len()..(i + 1) * a.len()];
                for (fij, &aj) in row.iter_mut().zip(a) {
                    let p = gi * aj;
                    *fij += p * p;
                }
            }
        }
    }
    let inv = 1.0 / calib.len() as f64;
    for st in &mut stats {
        st.covariance = st.covariance.scale(inv);
        st.grad_covariance = st.grad_covariance.scale(inv);
        st.fisher_diag = st.fisher_diag.scale(inv);
    }
    Ok(stats)
}

fn accumulate_outer(acc: &mut DenseMatrix, a: &[f64], b: &[f64]) {
    let cols = b.len();
    let data = acc.data_mut();
    for (i, &ai) in a.iter().enumerate() {
        let row = &mut data[i * cols..(i + 1) * cols];
        for (r, &bj) in row.iter_mut().zip(b) {
            *r += ai * bj;
        }
    }
}

/// Uncentered input covariance per layer.
pub fn collect_covariance(model: &ModelState, calib: &Batch) -> Result<Vec<DenseMatrix>, CalibrationError> {
    Ok(collect_stats(model, calib)?.into_iter().map(|s| s.covariance).collect())
}

/// Empirical diagonal Fisher per layer.
pub fn fisher_diagonal(model: &ModelState, calib: &Batch) -> Result<Vec<DenseMatrix>, CalibrationError> {
    Ok(collect_stats(model, calib)?
        .into_iter()
        .map(|s| s.fisher_diag)
        .collect())
}

/// Undamped K-FAC factors `(A, G)` per layer.
pub fn kfac_factors(model: &ModelState, calib: &Batch) -> Result<Vec<(DenseMatrix, DenseMatrix)>, CalibrationError> {
    Ok(collect_stats(model, calib)?
        .into_iter()
        .map(|s| (s.covariance, s.grad_covariance))
        .collect())
}

/// Cholesky whitening factor of `s` (default damping) and its inverse.
pub fn whitening_factors(s: &DenseMatrix) -> Result<(DenseMatrix, DenseMatrix), LinalgError> {
    let x = cholesky(s, default_damping(s))?;
    let x_inv = invert_lower_triangular(&x)?;
    Ok((x, x_inv))
}

/// Adds `KFAC_DAMPING × mean diagonal` (floored) to a K-FAC factor.
pub fn damp_kfac(factor: &DenseMatrix) -> DenseMatrix {
    let mean = factor.trace() / factor.rows() as f64;
    factor.symmetrize().add_diag((KFAC_DAMPING * mean).max(DAMPING_FLOOR))
}

/// Full calibration bundle, one entry per layer.
pub fn calibrate(model: &ModelState, calib: &Batch) -> Result<Vec<LayerCalibration>, CalibrationError> {
    let stats = collect_stats(model, calib)?;
    stats
        .into_iter()
        .enumerate()
        .map(|(layer, st)| {
            let (whitening_x, whitening_x_inv) =
                whitening_factors(&st.covariance).map_err(|source| CalibrationError::Layer { layer, source })?;
            Ok(LayerCalibration {
                whitening_x,
                whitening_x_inv,
                fisher_diag: st.fisher_diag,
                kfac_a: damp_kfac(&st.covariance),
                kfac_g: damp_kfac(&st.grad_covariance),
                sample_count: calib.len(),
            })
        })
        .collect()
}
