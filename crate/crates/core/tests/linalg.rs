//! Kernel checks against nalgebra and property tests of SVD invariants.

mod common;

use common::{geometric, lower_triangular, rng, with_spectrum};
use nalgebra::DMatrix;
use prehab::linalg::{
    cholesky, invert_lower_triangular, sketch_stable_rank, svd, symmetric_eigen, symmetric_power, truncate, DenseMatrix,
};
use prehab::surrogates::stable_rank;
use proptest::prelude::*;

fn to_na(m: &DenseMatrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.data())
}

fn sorted_desc(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[test]
fn singular_values_match_nalgebra() {
    let mut r = rng(10);
    for (m, n) in [(1, 1), (1, 7), (7, 1), (5, 5), (12, 4), (4, 12), (30, 17)] {
        let a = DenseMatrix::gaussian(m, n, 1.0, &mut r);
        let ours = svd(&a).unwrap();
        let theirs = sorted_desc(to_na(&a).singular_values().iter().copied().collect());
        assert_eq!(ours.sigma.len(), m.min(n));
        for (x, y) in ours.sigma.iter().zip(&theirs) {
            assert!((x - y).abs() <= 1e-12 * theirs[0], "{m}x{n}: {x} vs {y}");
        }
    }
}

#[test]
fn cholesky_matches_nalgebra() {
    let mut r = rng(11);
    for n in [1, 2, 6, 15] {
        let b = DenseMatrix::gaussian(n, n + 3, 1.0, &mut r);
        let s = b.matmul_t(&b);
        let ours = cholesky(&s, 0.0).unwrap();
        let theirs = to_na(&s).cholesky().unwrap().l();
        assert!(ours.max_abs_diff(&DenseMatrix::new(n, n, theirs.transpose().as_slice().to_vec()).unwrap()) < 1e-10);
        assert!(ours.is_lower_triangular());
    }
}

#[test]
fn eigenvalues_match_nalgebra() {
    let mut r = rng(12);
    for n in [1, 3, 8, 20] {
        let a = DenseMatrix::gaussian(n, n, 1.0, &mut r).symmetrize();
        let ours = symmetric_eigen(&a).unwrap();
        let theirs = sorted_desc(to_na(&a).symmetric_eigen().eigenvalues.iter().copied().collect());
        for (x, y) in ours.values.iter().zip(&theirs) {
            assert!((x - y).abs() < 1e-10, "{n}: {x} vs {y}");
        }
        let rebuilt = ours.vectors.scale_cols(&ours.values).matmul_t(&ours.vectors);
        assert!(rebuilt.max_abs_diff(&a) < 1e-10);
    }
}

#[test]
fn inverse_square_root_whitens() {
    let mut r = rng(13);
    let b = DenseMatrix::gaussian(6, 10, 1.0, &mut r);
    let s = b.matmul_t(&b);
    let half = symmetric_power(&s, 0.5, 0.0).unwrap();
    let inv_half = symmetric_power(&s, -0.5, 0.0).unwrap();
    assert!(half.matmul(&half).max_abs_diff(&s) < 1e-9);
    assert!(half.matmul(&inv_half).max_abs_diff(&DenseMatrix::identity(6)) < 1e-9);
}

#[test]
fn triangular_inverse_matches_nalgebra() {
    let mut r = rng(14);
    let x = lower_triangular(9, &mut r);
    let ours = invert_lower_triangular(&x).unwrap();
    let theirs = to_na(&x).try_inverse().unwrap();
    assert!(ours.max_abs_diff(&DenseMatrix::new(9, 9, theirs.transpose().as_slice().to_vec()).unwrap()) < 1e-10);
    assert!(ours.is_lower_triangular());
}

#[test]
fn truncation_rejects_bad_ranks() {
    let s = svd(&DenseMatrix::identity(3)).unwrap();
    assert!(truncate(&s, 0).is_err());
    assert!(truncate(&s, 4).is_err());
    assert_eq!(truncate(&s, 3).unwrap(), s);
}

#[test]
fn zero_matrix_factors_with_damping_floor() {
    let x = cholesky(&DenseMatrix::zeros(3, 3), 1e-12).unwrap();
    assert!(x.diag().iter().all(|&d| d > 0.0));
    assert!(cholesky(&DenseMatrix::zeros(3, 3), 0.0).is_err());
}

/// Regenerates the committed sketch calibration table.
#[test]
fn sketch_calibration_table_is_reproducible() {
    let table = include_str!("data/sketch_calibration.csv");
    let mut rows = table.lines();
    assert_eq!(
        rows.next().unwrap(),
        "decay,median_rel_error,p95_rel_error,max_rel_error,within_5pct"
    );
    for line in rows {
        let fields: Vec<&str> = line.split(',').collect();
        let q: f64 = fields[0].parse().unwrap();
        let mut errs: Vec<f64> = (0..100u64)
            .map(|seed| {
                let mut r = rng(seed);
                let m = with_spectrum(100, 80, &geometric(80, q), &mut r);
                let exact = stable_rank(&m).unwrap();
                (sketch_stable_rank(&m, 40, seed).unwrap() - exact).abs() / exact
            })
            .collect();
        errs.sort_by(f64::total_cmp);
        let within = errs.iter().filter(|&&e| e <= 0.05).count();
        let regenerated = format!("{q},{:.4},{:.4},{:.4},{within}", errs[50], errs[94], errs[99]);
        assert_eq!(regenerated, line);
    }
}

#[test]
fn sketch_is_exact_for_low_rank_and_full_width() {
    let mut r = rng(15);
    let low = with_spectrum(30, 20, &[3.0, 2.0, 1.0], &mut r);
    let exact = stable_rank(&low).unwrap();
    assert!((sketch_stable_rank(&low, 5, 1).unwrap() - exact).abs() < 1e-9 * exact);
    let full = DenseMatrix::gaussian(25, 20, 1.0, &mut r);
    let exact = stable_rank(&full).unwrap();
    assert!((sketch_stable_rank(&full, 20, 2).unwrap() - exact).abs() < 1e-9 * exact);
    assert!(sketch_stable_rank(&full, 0, 0).is_err());
    assert!(sketch_stable_rank(&full, 21, 0).is_err());
}

fn matrix() -> impl Strategy<Value = DenseMatrix> {
    (1usize..9, 1usize..9, any::<u64>()).prop_map(|(m, n, seed)| DenseMatrix::gaussian(m, n, 1.0, &mut rng(seed)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn svd_reconstructs_and_is_orthonormal(a in matrix()) {
        let s = svd(&a).unwrap();
        prop_assert!(s.reconstruct().max_abs_diff(&a) < 1e-10);
        prop_assert!(s.u.orthonormality_error() < 1e-10);
        prop_assert!(s.v.orthonormality_error() < 1e-10);
        prop_assert!(s.sigma.windows(2).all(|w| w[0] >= w[1]));
        prop_assert!(s.sigma.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn svd_signs_are_canonical(a in matrix()) {
        let s = svd(&a).unwrap();
        for j in 0..s.u.cols() {
            let first = s.u.col(j).into_iter().find(|x| x.abs() > 1e-12);
            prop_assert!(first.is_none_or(|x| x > 0.0));
        }
    }

    #[test]
    fn svd_of_transpose_shares_spectrum(a in matrix()) {
        let s = svd(&a).unwrap().sigma;
        let t = svd(&a.transpose()).unwrap().sigma;
        for (x, y) in s.iter().zip(&t) {
            prop_assert!((x - y).abs() < 1e-10 * s[0].max(1.0));
        }
    }

    #[test]
    fn tail_energy_is_truncation_error(a in matrix(), k in 1usize..9) {
        let s = svd(&a).unwrap();
        let k = k.min(s.rank_count());
        let t = truncate(&s, k).unwrap();
        let err = a.sub(&t.reconstruct()).frobenius_norm_sq();
        prop_assert!((err - s.tail_energy(k)).abs() < 1e-10 * a.frobenius_norm_sq().max(1.0));
    }
}
