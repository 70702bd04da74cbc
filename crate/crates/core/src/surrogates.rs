//! Differentiable rank surrogates over whitened weights `M = W·X`.
//!
//! * spectral ℓ1: `‖M‖_* = Σ σᵢ(M)`, gradient `U·Vᵀ·Xᵀ`;
//! * stable rank: `‖M‖_*² / ‖M‖_F²`, gradient
//!   `(2n/f)·(U·Vᵀ − (n/f)·M)·Xᵀ` with `n = ‖M‖_*`, `f = ‖M‖_F²`.
//!
//! The stable-rank gradient is the plain chain-rule derivative and is
//! checked against central finite differences in the tests. `U·Vᵀ` only
//! includes components with `σᵢ > 1e-10·σ₁`, which is the minimum-norm
//! subgradient when the spectrum has (numerically) zero values.

use serde::{Deserialize, Serialize};

use crate::linalg::{svd, DenseMatrix, LinalgError, SvdResult};

/// Singular values at or below this fraction of `σ₁` count as zero.
pub const ZERO_SINGULAR_TOLERANCE: f64 = 1e-10;

/// Relative gap under which the spectrum is flagged as degenerate.
pub const DEGENERACY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    SpectralL1,
    #[default]
    StableRank,
}

/// Surrogate value, gradient w.r.t. `W` and spectrum diagnostics from a
/// single SVD of `W·X`.
#[derive(Debug, Clone)]
pub struct SurrogateEval {
    pub value: f64,
    pub grad: DenseMatrix,
    pub stable_rank: f64,
    /// Repeated or zero singular values: `U·Vᵀ` is not unique and the
    /// returned gradient is a subgradient.
    pub degenerate: bool,
    pub spectrum: Vec<f64>,
}

fn whitened(w: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    w.try_matmul(x)
}

/// Repeated or (relatively) zero singular values.
pub fn is_degenerate(sigma: &[f64]) -> bool {
    let top = sigma.first().copied().unwrap_or(0.0);
    if top == 0.0 {
        return true;
    }
    let tol = DEGENERACY_TOLERANCE * top;
    sigma.iter().any(|&s| s <= tol) || sigma.windows(2).any(|w| w[0] - w[1] <= tol)
}

pub fn spectral_l1(w: &DenseMatrix, x: &DenseMatrix) -> Result<f64, LinalgError> {
    Ok(svd(&whitened(w, x)?)?.nuclear_norm())
}

pub fn spectral_l1_grad(w: &DenseMatrix, x: &DenseMatrix) -> Result<(DenseMatrix, bool), LinalgError> {
    let s = svd(&whitened(w, x)?)?;
    Ok((
        s.polar_factor(ZERO_SINGULAR_TOLERANCE).matmul_t(x),
        is_degenerate(&s.sigma),
    ))
}

/// `‖m‖_*² / ‖m‖_F²`; undefined for the zero matrix.
pub fn stable_rank(m: &DenseMatrix) -> Result<f64, LinalgError> {
    stable_rank_of(&svd(m)?)
}

fn stable_rank_of(s: &SvdResult) -> Result<f64, LinalgError> {
    let energy = s.frobenius_norm_sq();
    if energy == 0.0 {
        return Err(LinalgError::ZeroMatrix);
    }
    let nuclear = s.nuclear_norm();
    Ok(nuclear * nuclear / energy)
}

pub fn stable_rank_grad(w: &DenseMatrix, x: &DenseMatrix) -> Result<(DenseMatrix, bool), LinalgError> {
    let eval = evaluate(SurrogateKind::StableRank, w, x)?;
    Ok((eval.grad, eval.degenerate))
}

/// Value and gradient of `kind` at `W·X`.
pub fn evaluate(kind: SurrogateKind, w: &DenseMatrix, x: &DenseMatrix) -> Result<SurrogateEval, LinalgError> {
    let m = whitened(w, x)?;
    let s = svd(&m)?;
    let degenerate = is_degenerate(&s.sigma);
    let polar = s.polar_factor(ZERO_SINGULAR_TOLERANCE);
    let nuclear = s.nuclear_norm();
    let energy = s.frobenius_norm_sq();
    let (value, stable_rank, whitened_grad) = match kind {
        SurrogateKind::SpectralL1 => {
            let sr = if energy > 0.0 { nuclear * nuclear / energy } else { 0.0 };
            (nuclear, sr, polar)
        }
        SurrogateKind::StableRank => {
            let sr = stable_rank_of(&s)?;
            let coef = 2.0 * nuclear / energy;
            let mut g = m.scale(-nuclear / energy);
            g.axpy(1.0, &polar);
            (sr, sr, g.scale(coef))
        }
    };
    Ok(SurrogateEval {
        value,
        grad: whitened_grad.matmul_t(x),
        stable_rank,
        degenerate,
        spectrum: s.sigma,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn spectral_l1_examples() {
        let w = DenseMatrix::from_diag(&[3.0, 4.0]);
        let eye = DenseMatrix::identity(2);
        assert!((spectral_l1(&w, &eye).unwrap() - 7.0).abs() < 1e-14);
        assert_eq!(spectral_l1(&w, &DenseMatrix::zeros(2, 2)).unwrap(), 0.0);
        let (g, degenerate) = spectral_l1_grad(&w, &eye).unwrap();
        assert!(g.max_abs_diff(&eye) < 1e-14);
        assert!(!degenerate);
    }

    #[test]
    fn spectral_l1_grad_is_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = DenseMatrix::gaussian(4, 3, 1.0, &mut rng);
        let x = DenseMatrix::gaussian(3, 3, 1.0, &mut rng);
        let (g1, _) = spectral_l1_grad(&w, &x).unwrap();
        let (g2, _) = spectral_l1_grad(&w.scale(3.5), &x).unwrap();
        assert!(g1.max_abs_diff(&g2) < 1e-10);
    }

    #[test]
    fn stable_rank_examples() {
        assert!((stable_rank(&DenseMatrix::identity(6)).unwrap() - 6.0).abs() < 1e-12);
        let r1 = DenseMatrix::outer(&[1.0, -2.0, 0.5], &[3.0, 1.0]);
        assert!((stable_rank(&r1).unwrap() - 1.0).abs() < 1e-12);
        let d = DenseMatrix::from_diag(&[2.0, 1.0]);
        assert!((stable_rank(&d).unwrap() - 1.8).abs() < 1e-14);
        assert_eq!(stable_rank(&DenseMatrix::zeros(2, 3)), Err(LinalgError::ZeroMatrix));
    }

    #[test]
    fn stable_rank_grad_vanishes_on_rank_one_cone() {
        let w = DenseMatrix::outer(&[1.0, 2.0, -1.0], &[0.5, -1.0, 2.0, 1.0]).scale(3.0);
        let (g, degenerate) = stable_rank_grad(&w, &DenseMatrix::identity(4)).unwrap();
        assert!(g.frobenius_norm() < 1e-8);
        assert!(degenerate);
    }

    #[test]
    fn stable_rank_grad_scales_inversely() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = DenseMatrix::gaussian(5, 4, 1.0, &mut rng);
        let x = DenseMatrix::gaussian(4, 4, 1.0, &mut rng);
        let (g, _) = stable_rank_grad(&w, &x).unwrap();
        let (gc, _) = stable_rank_grad(&w.scale(4.0), &x).unwrap();
        assert!(gc.max_abs_diff(&g.scale(0.25)) < 1e-10);
        // Euler: degree-0 homogeneity means ⟨∇, W⟩ = 0.
        assert!(g.inner(&w).abs() < 1e-8);
    }

    #[test]
    fn zero_product_is_an_error() {
        let w = DenseMatrix::identity(2);
        assert!(stable_rank_grad(&w, &DenseMatrix::zeros(2, 2)).is_err());
        assert!(spectral_l1(&w, &DenseMatrix::zeros(3, 3)).is_err());
    }
}
