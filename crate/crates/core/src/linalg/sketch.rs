//! Gaussian-sketch stable-rank estimation.
//!
//! The Frobenius energy is exact; the nuclear norm is replaced by the
//! nuclear norm of `Qᵀ·M`, where `Q` is an orthonormal basis for the range
//! of `M·Ω` and `Ω` is a seeded Gaussian test matrix. `‖QᵀM‖_* ≤ ‖M‖_*`
//! with equality whenever `Q` spans the column space of `M`, so the
//! estimate is exact for full-width sketches and for matrices of rank at
//! most `sketch_cols`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{dot, svd, DenseMatrix, LinalgError};

/// Columns whose Gram-Schmidt residual falls below this fraction of their
/// original norm are dropped as linearly dependent.
const DEPENDENCE_TOLERANCE: f64 = 1e-10;

pub fn sketch_stable_rank(m: &DenseMatrix, sketch_cols: usize, seed: u64) -> Result<f64, LinalgError> {
    if sketch_cols == 0 || sketch_cols > m.cols() {
        return Err(LinalgError::SketchWidth {
            sketch_cols,
            cols: m.cols(),
        });
    }
    let energy = m.frobenius_norm_sq();
    if energy == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let omega = DenseMatrix::gaussian(m.cols(), sketch_cols, 1.0, &mut rng);
    let q = orthonormal_range(&m.matmul(&omega));
    let projected = q.t_matmul(m);
    let nuclear = svd(&projected)?.nuclear_norm();
    Ok(nuclear * nuclear / energy)
}

/// Orthonormal basis for the column space of `y` by two-pass modified
/// Gram-Schmidt. Always returns at least one column for nonzero `y`.
fn orthonormal_range(y: &DenseMatrix) -> DenseMatrix {
    let rows = y.rows();
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for j in 0..y.cols() {
        if basis.len() == rows {
            break;
        }
        let mut col = y.col(j);
        let original = dot(&col, &col).sqrt();
        if original == 0.0 {
            continue;
        }
        for _ in 0..2 {
            for b in &basis {
                let proj = dot(b, &col);
                col.iter_mut().zip(b).for_each(|(c, x)| *c -= proj * x);
            }
        }
        let norm = dot(&col, &col).sqrt();
        if norm > DEPENDENCE_TOLERANCE * original {
            col.iter_mut().for_each(|c| *c /= norm);
            basis.push(col);
        }
    }
    let mut q = DenseMatrix::zeros(rows, basis.len().max(1));
    for (j, b) in basis.iter().enumerate() {
        q.set_col(j, b);
    }
    q
}
