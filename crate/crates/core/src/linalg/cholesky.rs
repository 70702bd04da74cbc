use super::{DenseMatrix, LinalgError};

/// Diagonal entries with magnitude below this are treated as singular.
pub const PIVOT_THRESHOLD: f64 = 1e-12;

/// Default covariance damping: `1e-6 ×` the mean diagonal, floored at
/// `1e-12` so an all-zero covariance still factors.
pub fn default_damping(s: &DenseMatrix) -> f64 {
    let n = s.rows().min(s.cols()) as f64;
    (1e-6 * s.trace() / n).max(1e-12)
}

/// Lower-triangular `X` with `X·Xᵀ = sym(s) + damping·I`.
pub fn cholesky(s: &DenseMatrix, damping: f64) -> Result<DenseMatrix, LinalgError> {
    if !s.is_square() {
        return Err(LinalgError::NotSquare {
            op: "cholesky",
            rows: s.rows(),
            cols: s.cols(),
        });
    }
    if damping < 0.0 || damping.is_nan() {
        return Err(LinalgError::NegativeDamping(damping));
    }
    let n = s.rows();
    let a = s.symmetrize().add_diag(damping);
    let mut l = DenseMatrix::zeros(n, n);
    for j in 0..n {
        let row_j = &l.row(j)[..j];
        let pivot = a[(j, j)] - row_j.iter().map(|x| x * x).sum::<f64>();
        if pivot.is_nan() || pivot <= 0.0 {
            return Err(LinalgError::NotPositiveDefinite { index: j, value: pivot });
        }
        let d = pivot.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let s_ij: f64 = (0..j).map(|k| l[(i, k)] * l[(j, k)]).sum();
            l[(i, j)] = (a[(i, j)] - s_ij) / d;
        }
    }
    Ok(l)
}

/// Inverse of a lower-triangular matrix by column-wise forward substitution.
pub fn invert_lower_triangular(x: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    if !x.is_square() {
        return Err(LinalgError::NotSquare {
            op: "invert_lower_triangular",
            rows: x.rows(),
            cols: x.cols(),
        });
    }
    let n = x.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            if x[(i, j)] != 0.0 {
                return Err(LinalgError::NotLowerTriangular { row: i, col: j });
            }
        }
        if x[(i, i)].abs() < PIVOT_THRESHOLD {
            return Err(LinalgError::Singular {
                index: i,
                value: x[(i, i)],
            });
        }
    }
    let mut inv = DenseMatrix::zeros(n, n);
    for j in 0..n {
        inv[(j, j)] = 1.0 / x[(j, j)];
        for i in (j + 1)..n {
            let acc: f64 = (j..i).map(|k| x[(i, k)] * inv[(k, j)]).sum();
            inv[(i, j)] = -acc / x[(i, i)];
        }
    }
    Ok(inv)
}
