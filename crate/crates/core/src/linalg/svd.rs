//! One-sided (Hestenes) Jacobi SVD.

use super::{dot, DenseMatrix, LinalgError};

/// Relative orthogonality threshold: a column pair is rotated while
/// `|⟨a_p, a_q⟩| > SVD_TOLERANCE · ‖a_p‖ ‖a_q‖`.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Sweep cap before the decomposition is reported as non-convergent.
pub const MAX_SWEEPS: usize = 60;

/// Thin SVD `M = U · diag(σ) · Vᵀ` with `k = min(m, n)` components.
///
/// `sigma` is non-increasing. Columns of `u` and `v` are orthonormal and
/// each column of `u` has its first nonzero entry positive.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub v: DenseMatrix,
}

impl SvdResult {
    pub fn rank_count(&self) -> usize {
        self.sigma.len()
    }

    /// `U · diag(σ) · Vᵀ`.
    pub fn reconstruct(&self) -> DenseMatrix {
        self.u.scale_cols(&self.sigma).matmul_t(&self.v)
    }

    pub fn nuclear_norm(&self) -> f64 {
        self.sigma.iter().sum()
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        self.sigma.iter().map(|s| s * s).sum()
    }

    /// `Σ_{i>r} σᵢ²`, the squared Frobenius error of the best rank-`r` fit.
    pub fn tail_energy(&self, r: usize) -> f64 {
        self.sigma.iter().skip(r).map(|s| s * s).sum()
    }

    /// Number of singular values above `rel_tol · σ₁`.
    pub fn numerical_rank(&self, rel_tol: f64) -> usize {
        let top = self.sigma.first().copied().unwrap_or(0.0);
        if top == 0.0 {
            return 0;
        }
        self.sigma.iter().filter(|&&s| s > rel_tol * top).count()
    }

    /// `U · Vᵀ` restricted to singular values above `rel_tol · σ₁`.
    pub fn polar_factor(&self, rel_tol: f64) -> DenseMatrix {
        let r = self.numerical_rank(rel_tol);
        if r == 0 {
            return DenseMatrix::zeros(self.u.rows(), self.v.rows());
        }
        self.u.leading_cols(r).matmul_t(&self.v.leading_cols(r))
    }
}

/// Full thin SVD of `m`.
pub fn svd(m: &DenseMatrix) -> Result<SvdResult, LinalgError> {
    let (rows, cols) = m.shape();
    let (u, sigma, v) = if rows >= cols {
        jacobi_tall(m)?
    } else {
        let (u, sigma, v) = jacobi_tall(&m.transpose())?;
        (v, sigma, u)
    };
    Ok(normalize(u, sigma, v))
}

/// Leading `r` components of `s`.
pub fn truncate(s: &SvdResult, r: usize) -> Result<SvdResult, LinalgError> {
    let k = s.sigma.len();
    if r == 0 || r > k {
        return Err(LinalgError::RankOutOfRange { rank: r, max: k });
    }
    Ok(SvdResult {
        u: s.u.leading_cols(r),
        sigma: s.sigma[..r].to_vec(),
        v: s.v.leading_cols(r),
    })
}

/// Jacobi iteration on a matrix with `rows ≥ cols`. Returns U (rows×cols),
/// σ and V (cols×cols), unsorted.
fn jacobi_tall(m: &DenseMatrix) -> Result<(DenseMatrix, Vec<f64>, DenseMatrix), LinalgError> {
    let (rows, cols) = m.shape();
    // Column-major working copies so rotations touch contiguous memory.
    let mut a = m.transpose().into_data();
    let mut v = DenseMatrix::identity(cols).into_data();

    let mut converged = cols < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..cols - 1 {
            for q in (p + 1)..cols {
                let (ap, aq) = column_pair(&mut a, rows, p, q);
                let alpha = dot(ap, ap);
                let beta = dot(aq, aq);
                let gamma = dot(ap, aq);
                if gamma == 0.0 || gamma.abs() <= SVD_TOLERANCE * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(ap, aq, c, s);
                let (vp, vq) = column_pair(&mut v, cols, p, q);
                rotate(vp, vq, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(LinalgError::NoConvergence {
            op: "jacobi svd",
            sweeps: MAX_SWEEPS,
        });
    }

    let mut sigma = Vec::with_capacity(cols);
    let mut zero_cols = Vec::new();
    for j in 0..cols {
        let col = &mut a[j * rows..(j + 1) * rows];
        let norm = dot(col, col).sqrt();
        sigma.push(norm);
        if norm > 0.0 {
            col.iter_mut().for_each(|x| *x /= norm);
        } else {
            zero_cols.push(j);
        }
    }
    complete_basis(&mut a, rows, cols, &zero_cols);

    let u = DenseMatrix::new(cols, rows, a)?.transpose();
    let v = DenseMatrix::new(cols, cols, v)?.transpose();
    Ok((u, sigma, v))
}

fn column_pair(buf: &mut [f64], len: usize, p: usize, q: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(p < q);
    let (head, tail) = buf.split_at_mut(q * len);
    (&mut head[p * len..(p + 1) * len], &mut tail[..len])
}

fn rotate(xp: &mut [f64], xq: &mut [f64], c: f64, s: f64) {
    for (a, b) in xp.iter_mut().zip(xq.iter_mut()) {
        let (x, y) = (*a, *b);
        *a = c * x - s * y;
        *b = s * x + c * y;
    }
}

/// Replaces exactly-zero columns with unit vectors orthogonal to every
/// other column (Gram-Schmidt over the standard basis, two passes).
fn complete_basis(a: &mut [f64], rows: usize, cols: usize, zero_cols: &[usize]) {
    let mut filled: Vec<usize> = (0..cols).filter(|j| !zero_cols.contains(j)).collect();
    for &z in zero_cols {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for e in 0..rows {
            let mut cand = vec![0.0; rows];
            cand[e] = 1.0;
            for _ in 0..2 {
                for &j in &filled {
                    let col = &a[j * rows..(j + 1) * rows];
                    let proj = dot(col, &cand);
                    cand.iter_mut().zip(col).for_each(|(c, x)| *c -= proj * x);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if best.as_ref().is_none_or(|(b, _)| norm > *b + 1e-12) {
                best = Some((norm, cand));
            }
        }
        let (norm, cand) = best.expect("rows > 0");
        let col = &mut a[z * rows..(z + 1) * rows];
        col.iter_mut().zip(&cand).for_each(|(c, x)| *c = x / norm);
        filled.push(z);
    }
}

/// Sorts components by descending σ and fixes column signs.
fn normalize(u: DenseMatrix, sigma: Vec<f64>, v: DenseMatrix) -> SvdResult {
    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));
    let mut u = u.select_cols(&order);
    let mut v = v.select_cols(&order);
    let sigma: Vec<f64> = order.iter().map(|&i| sigma[i]).collect();
    for j in 0..sigma.len() {
        let lead = (0..u.rows()).map(|i| u[(i, j)]).find(|x| x.abs() > 1e-12);
        if matches!(lead, Some(x) if x < 0.0) {
            for i in 0..u.rows() {
                u[(i, j)] = -u[(i, j)];
            }
            for i in 0..v.rows() {
                v[(i, j)] = -v[(i, j)];
            }
        }
    }
    SvdResult { u, sigma, v }
}
