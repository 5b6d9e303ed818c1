//! Fixed-seed inputs shared by the kernel benchmarks.

use btm_core::rng::rng_from;
use btm_core::surrogate::BezierSurrogate;
use btm_core::{Batch, Matrix, MlpConfig, Params};
use rand::Rng;

/// Entries uniform on `[-1, 1)`.
pub fn uniform_vec(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng_from(seed);
    (0..len).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn uniform_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    Matrix::new(rows, cols, uniform_vec(rows * cols, seed)).expect("finite entries")
}

/// A balanced batch of `n` rows in `d` dimensions.
pub fn batch(n: usize, d: usize, seed: u64) -> Batch {
    let y = (0..n).map(|i| (i % 2) as f64).collect();
    Batch::new(uniform_matrix(n, d, seed), y).expect("matching shapes")
}

pub fn params(cfg: &MlpConfig, seed: u64) -> Params {
    cfg.init_params(seed)
}

pub fn surrogate(p: usize, seed: u64) -> BezierSurrogate {
    BezierSurrogate::new(
        Params(uniform_vec(p, seed)),
        Params(uniform_vec(p, seed + 1)),
        Params(uniform_vec(p, seed + 2)),
    )
    .expect("finite control points")
}
