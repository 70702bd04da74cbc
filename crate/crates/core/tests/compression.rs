//! Calibration statistics and the optimality of each compressor in its own
//! metric.

mod common;

use common::{rng, small_dataset_spec};
use prehab::calibration::{calibrate, collect_covariance, LayerCalibration};
use prehab::compressors::{
    compress_layer, compress_model, fisher_weighted_error, frobenius_error, kfac_weighted_error, rank_for_ratio,
    row_importance, whitened_error, CompressionMethod, CompressionPlan,
};
use prehab::linalg::{default_damping, svd, symmetric_power, DenseMatrix};
use prehab::model::{Activation, ModelState};
use prehab::pipeline::gen_dataset;
use rand::Rng;

fn trained_setup() -> (ModelState, Vec<LayerCalibration>, prehab::model::Batch) {
    let data = gen_dataset(&small_dataset_spec(3)).unwrap();
    let model = ModelState::init(&[8, 12, 10, 3], 3).unwrap();
    let calibs = calibrate(&model, &data.calibration).unwrap();
    (model, calibs, data.calibration)
}

#[test]
fn whitening_matches_expected_activation_energy() {
    let (model, calibs, calib) = trained_setup();
    let s = &collect_covariance(&model, &calib).unwrap()[0];
    let x = &calibs[0].whitening_x;
    let mut r = rng(50);
    for _ in 0..10 {
        let delta = DenseMatrix::gaussian(12, 8, 1.0, &mut r);
        let whitened = delta.matmul(x).frobenius_norm_sq();
        let expected = delta.matmul(&calib.inputs).frobenius_norm_sq() / calib.len() as f64;
        // Damping contributes exactly δ·‖Δ‖².
        let damping = default_damping(s) * delta.frobenius_norm_sq();
        assert!((whitened - expected - damping).abs() < 1e-10 * expected);
    }
    assert!(
        x.matmul(&calibs[0].whitening_x_inv)
            .max_abs_diff(&DenseMatrix::identity(8))
            < 1e-10
    );
}

#[test]
fn calibration_shapes_and_signs() {
    let (model, calibs, calib) = trained_setup();
    assert_eq!(calibs.len(), model.layers.len());
    for (c, l) in calibs.iter().zip(&model.layers) {
        assert_eq!(c.whitening_x.shape(), (l.in_dim(), l.in_dim()));
        assert_eq!(c.fisher_diag.shape(), (l.out_dim(), l.in_dim()));
        assert_eq!(c.kfac_a.shape(), (l.in_dim(), l.in_dim()));
        assert_eq!(c.kfac_g.shape(), (l.out_dim(), l.out_dim()));
        assert!(c.fisher_diag.data().iter().all(|&f| f >= 0.0));
        assert!(c.whitening_x.is_lower_triangular());
        assert_eq!(c.sample_count, calib.len());
    }
}

#[test]
fn whitened_svd_is_optimal_in_whitened_metric() {
    let (model, calibs, _) = trained_setup();
    let w = model.layers[0].effective_weight();
    let x = &calibs[0].whitening_x;
    let spectrum = svd(&w.matmul(x)).unwrap();
    let mut r = rng(51);
    for rank in 1..8 {
        let layer = compress_layer(
            &w,
            &[0.0; 12],
            Activation::Relu,
            CompressionMethod::WhitenedSvd,
            Some(&calibs[0]),
            rank,
        )
        .unwrap();
        let err = whitened_error(&w, &layer.reconstruct(), x);
        assert!((err - spectrum.tail_energy(rank)).abs() < 1e-9 * spectrum.frobenius_norm_sq());
        let plain = compress_layer(
            &w,
            &[0.0; 12],
            Activation::Relu,
            CompressionMethod::PlainSvd,
            None,
            rank,
        )
        .unwrap();
        assert!(err <= whitened_error(&w, &plain.reconstruct(), x) * (1.0 + 1e-12));
        for _ in 0..20 {
            let eps = r.random_range(1e-4..1e-1);
            let cand = layer
                .left
                .add(&DenseMatrix::gaussian(12, rank, eps, &mut r))
                .matmul(&layer.right.add(&DenseMatrix::gaussian(rank, 8, eps, &mut r)));
            assert!(err <= whitened_error(&w, &cand, x) * (1.0 + 1e-12));
        }
    }
}

#[test]
fn gfwsvd_is_optimal_in_kfac_metric() {
    let (model, calibs, _) = trained_setup();
    let w = model.layers[1].effective_weight();
    let c = &calibs[1];
    let g_half = symmetric_power(&c.kfac_g, 0.5, 0.0).unwrap();
    let a_half = symmetric_power(&c.kfac_a, 0.5, 0.0).unwrap();
    let spectrum = svd(&g_half.matmul(&w).matmul(&a_half)).unwrap();
    let mut r = rng(52);
    for rank in 1..10 {
        let layer = compress_layer(
            &w,
            &[0.0; 10],
            Activation::Relu,
            CompressionMethod::Gfwsvd,
            Some(c),
            rank,
        )
        .unwrap();
        let err = kfac_weighted_error(&w, &layer.reconstruct(), &c.kfac_a, &c.kfac_g);
        assert!((err - spectrum.tail_energy(rank)).abs() < 1e-8 * spectrum.frobenius_norm_sq());
        for _ in 0..20 {
            let eps = r.random_range(1e-4..1e-1);
            let cand = layer
                .left
                .add(&DenseMatrix::gaussian(10, rank, eps, &mut r))
                .matmul(&layer.right.add(&DenseMatrix::gaussian(rank, 12, eps, &mut r)));
            assert!(err <= kfac_weighted_error(&w, &cand, &c.kfac_a, &c.kfac_g) * (1.0 + 1e-10));
        }
    }
}

#[test]
fn fwsvd_is_optimal_for_row_weighted_error() {
    let mut r = rng(53);
    let w = DenseMatrix::gaussian(6, 5, 1.0, &mut r);
    let fisher = DenseMatrix::from_fn(6, 5, |_, _| r.random_range(0.1..3.0));
    let d = row_importance(&fisher);
    let calib = LayerCalibration {
        whitening_x: DenseMatrix::identity(5),
        whitening_x_inv: DenseMatrix::identity(5),
        fisher_diag: fisher,
        kfac_a: DenseMatrix::identity(5),
        kfac_g: DenseMatrix::identity(6),
        sample_count: 1,
    };
    for rank in 1..5 {
        let layer = compress_layer(
            &w,
            &[0.0; 6],
            Activation::Relu,
            CompressionMethod::Fwsvd,
            Some(&calib),
            rank,
        )
        .unwrap();
        let err = frobenius_error(&w.scale_rows(&d), &layer.reconstruct().scale_rows(&d));
        let tail = svd(&w.scale_rows(&d)).unwrap().tail_energy(rank);
        assert!((err - tail).abs() < 1e-10 * w.scale_rows(&d).frobenius_norm_sq());
    }
}

#[test]
fn uniform_fisher_reduces_fwsvd_to_plain() {
    let mut r = rng(54);
    let w = DenseMatrix::gaussian(7, 4, 1.0, &mut r);
    let calib = LayerCalibration {
        whitening_x: DenseMatrix::identity(4),
        whitening_x_inv: DenseMatrix::identity(4),
        fisher_diag: DenseMatrix::from_fn(7, 4, |_, _| 2.5),
        kfac_a: DenseMatrix::identity(4),
        kfac_g: DenseMatrix::identity(7),
        sample_count: 1,
    };
    let fw = compress_layer(
        &w,
        &[0.0; 7],
        Activation::Relu,
        CompressionMethod::Fwsvd,
        Some(&calib),
        2,
    )
    .unwrap();
    let plain = compress_layer(&w, &[0.0; 7], Activation::Relu, CompressionMethod::PlainSvd, None, 2).unwrap();
    assert!(fw.reconstruct().max_abs_diff(&plain.reconstruct()) < 1e-12);
    let gf = compress_layer(
        &w,
        &[0.0; 7],
        Activation::Relu,
        CompressionMethod::Gfwsvd,
        Some(&calib),
        2,
    )
    .unwrap();
    assert!(gf.reconstruct().max_abs_diff(&plain.reconstruct()) < 1e-10);
    assert!(fisher_weighted_error(&w, &fw.reconstruct(), &calib.fisher_diag) >= 0.0);
}

#[test]
fn ratio_ranks() {
    assert_eq!(rank_for_ratio(64, 64, 0.4).unwrap(), 19);
    assert_eq!(rank_for_ratio(64, 64, 0.5).unwrap(), 16);
    assert_eq!(rank_for_ratio(64, 64, 0.6).unwrap(), 12);
    assert_eq!(rank_for_ratio(10, 8, 0.5).unwrap(), 2);
    assert_eq!(rank_for_ratio(6, 10, 0.5).unwrap(), 1);
    assert_eq!(rank_for_ratio(2, 2, 0.99).unwrap(), 1);
    assert!(rank_for_ratio(4, 4, 0.0).is_err());
    assert!(rank_for_ratio(4, 4, 1.0).is_err());
}

#[test]
fn plan_parameter_count_matches_compressed_model() {
    let (model, calibs, _) = trained_setup();
    let mask = [true, true, false];
    for method in CompressionMethod::ALL {
        let plan = CompressionPlan::for_ratio(&model, method, 0.5, &mask).unwrap();
        let compressed = compress_model(&model, &plan, Some(&calibs)).unwrap();
        assert_eq!(plan.compressed_param_count(&model), compressed.param_count());
        assert!(compressed.param_count() < model.param_count());
        assert!(compressed.layers[2].as_dense().is_some());
    }
}

#[test]
fn calibrated_methods_require_calibration() {
    let model = ModelState::init(&[4, 5, 2], 1).unwrap();
    for method in CompressionMethod::ALL {
        let plan = CompressionPlan::full_rank(&model, method, &[true, false]);
        assert_eq!(compress_model(&model, &plan, None).is_err(), method.needs_calibration());
    }
}

#[test]
fn factorized_layers_cannot_be_recompressed() {
    let model = ModelState::init(&[4, 5, 2], 1).unwrap();
    let plan = CompressionPlan::full_rank(&model, CompressionMethod::PlainSvd, &[true, false]);
    let once = compress_model(&model, &plan, None).unwrap();
    assert!(compress_model(&once, &plan, None).is_err());
}

#[test]
fn method_names_round_trip() {
    for method in CompressionMethod::ALL {
        assert_eq!(method.as_str().parse::<CompressionMethod>().unwrap(), method);
        let json = serde_json::to_string(&method).unwrap();
        assert_eq!(json, format!("\"{}\"", method.as_str()));
    }
    assert!("svd".parse::<CompressionMethod>().is_err());
}
