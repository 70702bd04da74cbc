//! Cyclic Jacobi eigendecomposition for symmetric matrices.

use super::{DenseMatrix, LinalgError};

/// Eigenvalue floor applied before fractional powers.
pub const EIGEN_FLOOR: f64 = 1e-10;

const MAX_EIGEN_SWEEPS: usize = 100;
const EIGEN_TOLERANCE: f64 = 1e-15;

/// `A = Q · diag(values) · Qᵀ`, eigenvalues non-increasing, eigenvectors in
/// the columns of `vectors`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: DenseMatrix,
}

pub fn symmetric_eigen(a: &DenseMatrix) -> Result<SymmetricEigen, LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::NotSquare {
            op: "symmetric_eigen",
            rows: a.rows(),
            cols: a.cols(),
        });
    }
    let n = a.rows();
    let mut m = a.symmetrize();
    let mut q = DenseMatrix::identity(n);

    let mut converged = n < 2;
    for _ in 0..MAX_EIGEN_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n - 1 {
            for r in (p + 1)..n {
                let apq = m[(p, r)];
                if apq == 0.0 || apq.abs() <= EIGEN_TOLERANCE * (m[(p, p)] * m[(r, r)]).abs().sqrt() {
                    continue;
                }
                rotated = true;
                let theta = (m[(r, r)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // M ← Jᵀ M J with J the rotation in the (p, r) plane.
                for k in 0..n {
                    let (mkp, mkr) = (m[(k, p)], m[(k, r)]);
                    m[(k, p)] = c * mkp - s * mkr;
                    m[(k, r)] = s * mkp + c * mkr;
                }
                for k in 0..n {
                    let (mpk, mrk) = (m[(p, k)], m[(r, k)]);
                    m[(p, k)] = c * mpk - s * mrk;
                    m[(r, k)] = s * mpk + c * mrk;
                }
                for k in 0..n {
                    let (qkp, qkr) = (q[(k, p)], q[(k, r)]);
                    q[(k, p)] = c * qkp - s * qkr;
                    q[(k, r)] = s * qkp + c * qkr;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            op: "jacobi eigen",
            sweeps: MAX_EIGEN_SWEEPS,
        });
    }

    let diag = m.diag();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[j].total_cmp(&diag[i]).then(i.cmp(&j)));
    Ok(SymmetricEigen {
        values: order.iter().map(|&i| diag[i]).collect(),
        vectors: q.select_cols(&order),
    })
}

/// `A^p` for symmetric `A`, with eigenvalues clamped below at `floor`.
pub fn symmetric_power(a: &DenseMatrix, power: f64, floor: f64) -> Result<DenseMatrix, LinalgError> {
    let eig = symmetric_eigen(a)?;
    let scaled: Vec<f64> = eig.values.iter().map(|&l| l.max(floor).powf(power)).collect();
    Ok(eig.vectors.scale_cols(&scaled).matmul_t(&eig.vectors))
}
