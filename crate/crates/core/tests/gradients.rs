//! Analytic gradients against central finite differences.

mod common;

use common::{finite_difference, lower_triangular, relative_diff, relative_diff_vec, rng};
use prehab::compressors::{compress_model, CompressionMethod, CompressionPlan};
use prehab::linalg::DenseMatrix;
use prehab::model::{Batch, Layer, LayerGrad, ModelState};
use prehab::surrogates::{evaluate, spectral_l1, stable_rank, SurrogateKind};
use proptest::prelude::*;
use rand::Rng;

fn random_batch(dim: usize, classes: usize, n: usize, seed: u64) -> Batch {
    let mut r = rng(seed);
    let inputs = DenseMatrix::gaussian(dim, n, 1.0, &mut r);
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Batch::new(inputs, labels).unwrap()
}

#[test]
fn surrogate_gradients_with_triangular_whitening() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let w = DenseMatrix::gaussian(7, 5, 1.0, &mut r);
        let x = lower_triangular(5, &mut r);
        for kind in [SurrogateKind::SpectralL1, SurrogateKind::StableRank] {
            let eval = evaluate(kind, &w, &x).unwrap();
            assert!(!eval.degenerate);
            let numeric = finite_difference(&w, 1e-6, |p| evaluate(kind, p, &x).unwrap().value);
            assert!(
                relative_diff(&eval.grad, &numeric, 1e-12) < 1e-5,
                "seed {seed} {kind:?}"
            );
        }
    }
}

#[test]
fn surrogate_values_agree_with_free_functions() {
    let mut r = rng(30);
    let w = DenseMatrix::gaussian(6, 4, 1.0, &mut r);
    let x = lower_triangular(4, &mut r);
    let m = w.matmul(&x);
    let l1 = evaluate(SurrogateKind::SpectralL1, &w, &x).unwrap();
    let sr = evaluate(SurrogateKind::StableRank, &w, &x).unwrap();
    assert!((l1.value - spectral_l1(&w, &x).unwrap()).abs() < 1e-12);
    assert!((sr.value - stable_rank(&m).unwrap()).abs() < 1e-12);
    assert!((l1.stable_rank - sr.stable_rank).abs() < 1e-12);
}

#[test]
fn stable_rank_gradient_is_scale_free() {
    // SR(cW) = SR(W), so the gradient is orthogonal to W.
    let mut r = rng(31);
    let w = DenseMatrix::gaussian(8, 6, 1.0, &mut r);
    let x = lower_triangular(6, &mut r);
    let g = evaluate(SurrogateKind::StableRank, &w, &x).unwrap().grad;
    assert!(g.inner(&w).abs() < 1e-10 * g.frobenius_norm() * w.frobenius_norm());
}

#[test]
fn repeated_singular_values_are_flagged() {
    let eval = evaluate(
        SurrogateKind::StableRank,
        &DenseMatrix::identity(4),
        &DenseMatrix::identity(4),
    )
    .unwrap();
    assert!(eval.degenerate);
    assert_eq!(eval.value, 4.0);
}

fn check_model_gradients(model: &ModelState, batch: &Batch) {
    let (_, grads) = model.loss_and_grads(batch).unwrap();
    let loss = |m: &ModelState| m.loss_and_grads(batch).unwrap().0;
    for (idx, g) in grads.layers.iter().enumerate() {
        let perturb = |edit: &dyn Fn(&mut Layer, &DenseMatrix), p: &DenseMatrix| {
            let mut m = model.clone();
            edit(&mut m.layers[idx], p);
            loss(&m)
        };
        let bias = model.layers[idx].bias().to_vec();
        let bias_m = DenseMatrix::new(1, bias.len(), bias).unwrap();
        let numeric_b = finite_difference(&bias_m, 1e-6, |p| {
            perturb(
                &|l, p| match l {
                    Layer::Dense(d) => d.bias = p.data().to_vec(),
                    Layer::Factorized(f) => f.bias = p.data().to_vec(),
                },
                p,
            )
        });
        assert!(
            relative_diff_vec(g.bias(), numeric_b.data(), 1e-12) < 1e-5,
            "layer {idx} bias"
        );
        match (g, &model.layers[idx]) {
            (LayerGrad::Dense { weight, .. }, Layer::Dense(d)) => {
                let numeric = finite_difference(&d.weight, 1e-6, |p| {
                    perturb(
                        &|l, p| {
                            if let Layer::Dense(d) = l {
                                d.weight = p.clone();
                            }
                        },
                        p,
                    )
                });
                assert!(relative_diff(weight, &numeric, 1e-12) < 1e-5, "layer {idx} weight");
            }
            (LayerGrad::Factorized { left, right, .. }, Layer::Factorized(f)) => {
                let numeric_l = finite_difference(&f.left, 1e-6, |p| {
                    perturb(
                        &|l, p| {
                            if let Layer::Factorized(f) = l {
                                f.left = p.clone();
                            }
                        },
                        p,
                    )
                });
                let numeric_r = finite_difference(&f.right, 1e-6, |p| {
                    perturb(
                        &|l, p| {
                            if let Layer::Factorized(f) = l {
                                f.right = p.clone();
                            }
                        },
                        p,
                    )
                });
                assert!(relative_diff(left, &numeric_l, 1e-12) < 1e-5, "layer {idx} left");
                assert!(relative_diff(right, &numeric_r, 1e-12) < 1e-5, "layer {idx} right");
            }
            _ => panic!("gradient kind does not match layer kind at {idx}"),
        }
    }
}

#[test]
fn dense_backprop_matches_finite_differences() {
    for seed in 0..3 {
        let model = ModelState::init(&[4, 6, 5, 3], seed).unwrap();
        check_model_gradients(&model, &random_batch(4, 3, 10, 40 + seed));
    }
}

#[test]
fn factorized_backprop_matches_finite_differences() {
    let model = ModelState::init(&[5, 8, 6, 3], 7).unwrap();
    let plan = CompressionPlan {
        method: CompressionMethod::PlainSvd,
        ratio: None,
        ranks: vec![Some(2), Some(3), None],
    };
    let compressed = compress_model(&model, &plan, None).unwrap();
    assert!(compressed.layers[0].as_factorized().is_some());
    check_model_gradients(&compressed, &random_batch(5, 3, 12, 41));
}

#[test]
fn loss_is_mean_cross_entropy() {
    let model = ModelState::init(&[3, 4, 2], 8).unwrap();
    let batch = random_batch(3, 2, 6, 42);
    let logits = model.logits(&batch.inputs).unwrap();
    let mut total = 0.0;
    for (j, &y) in batch.labels.iter().enumerate() {
        let col = logits.col(j);
        let max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + col.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        total += lse - col[y];
    }
    let (loss, _) = model.loss_and_grads(&batch).unwrap();
    assert!((loss - total / 6.0).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stable_rank_bounds(m in 1usize..10, n in 1usize..10, seed in any::<u64>()) {
        let w = DenseMatrix::gaussian(m, n, 1.0, &mut rng(seed));
        let sr = stable_rank(&w).unwrap();
        prop_assert!(sr >= 1.0 - 1e-12);
        prop_assert!(sr <= m.min(n) as f64 + 1e-12);
    }

    #[test]
    fn stable_rank_is_scale_invariant(seed in any::<u64>(), c in 1e-3f64..1e3) {
        let w = DenseMatrix::gaussian(6, 5, 1.0, &mut rng(seed));
        let a = stable_rank(&w).unwrap();
        let b = stable_rank(&w.scale(c)).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a);
    }

    #[test]
    fn rank_one_has_unit_stable_rank(seed in any::<u64>()) {
        let mut r = rng(seed);
        let u: Vec<f64> = (0..5).map(|_| r.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
        prop_assume!(u.iter().any(|x| x.abs() > 1e-3) && v.iter().any(|x| x.abs() > 1e-3));
        let sr = stable_rank(&DenseMatrix::outer(&u, &v)).unwrap();
        prop_assert!((sr - 1.0).abs() < 1e-9);
    }
}
