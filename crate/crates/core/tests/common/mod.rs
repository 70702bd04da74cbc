#![allow(dead_code)]

use prehab::linalg::{svd, DenseMatrix};
use prehab::pipeline::{DatasetSpec, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows × cols` matrix with orthonormal columns (`rows ≥ cols`).
pub fn orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    svd(&DenseMatrix::gaussian(rows, cols, 1.0, rng)).unwrap().u
}

/// `U·diag(sigma)·Vᵀ` with Haar-like random singular vectors.
pub fn with_spectrum(rows: usize, cols: usize, sigma: &[f64], rng: &mut ChaCha8Rng) -> DenseMatrix {
    let k = sigma.len();
    let u = orthonormal(rows, k, rng);
    let v = orthonormal(cols, k, rng);
    u.scale_cols(sigma).matmul_t(&v)
}

/// Lower-triangular matrix with diagonal in `[0.5, 1.5]`.
pub fn lower_triangular(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
    let mut x = DenseMatrix::gaussian(n, n, 0.3, rng);
    for i in 0..n {
        for j in i + 1..n {
            x[(i, j)] = 0.0;
        }
        x[(i, i)] = rng.random_range(0.5..1.5);
    }
    x
}

/// Central finite-difference gradient of `f` at `w`.
pub fn finite_difference(w: &DenseMatrix, h: f64, mut f: impl FnMut(&DenseMatrix) -> f64) -> DenseMatrix {
    let mut g = DenseMatrix::zeros(w.rows(), w.cols());
    let mut probe = w.clone();
    for i in 0..w.rows() {
        for j in 0..w.cols() {
            let orig = probe[(i, j)];
            probe[(i, j)] = orig + h;
            let up = f(&probe);
            probe[(i, j)] = orig - h;
            let down = f(&probe);
            probe[(i, j)] = orig;
            g[(i, j)] = (up - down) / (2.0 * h);
        }
    }
    g
}

/// `‖a − b‖_F / max(‖a‖_F, ‖b‖_F, floor)`.
pub fn relative_diff(a: &DenseMatrix, b: &DenseMatrix, floor: f64) -> f64 {
    a.sub(b).frobenius_norm() / a.frobenius_norm().max(b.frobenius_norm()).max(floor)
}

pub fn relative_diff_vec(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    norm(&diff) / norm(a).max(norm(b)).max(floor)
}

/// Fast grid used by determinism and resume checks.
pub fn small_config() -> ExperimentConfig {
    let text = r#"{
        "dataset": {"input_dim": 8, "num_classes": 3, "teacher_hidden": [6], "planted_rank": 2,
                    "train_samples": 512, "calibration_samples": 64, "test_samples": 128},
        "model": {"hidden_widths": [12, 12]},
        "base": {"budget": {"steps": 150}, "batch_size": 32},
        "prehab": {"budget": {"steps": 20}, "batch_size": 32},
        "rehab": {"steps_per_factor": 8, "batch_size": 32, "lora_rank": 2},
        "compression": {"methods": ["plain_svd", "fwsvd", "gfwsvd", "whitened_svd"], "ratios": [0.0, 0.5]},
        "lambdas": [0.0, 0.1],
        "seeds": [0, 1]
    }"#;
    ExperimentConfig::from_json(text).unwrap()
}

pub fn small_dataset_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        seed,
        ..small_config().dataset
    }
}

/// Geometric spectrum `q^i`, `i = 0..k`.
pub fn geometric(k: usize, q: f64) -> Vec<f64> {
    (0..k).map(|i| q.powi(i as i32)).collect()
}
