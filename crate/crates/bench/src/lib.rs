//! Fixtures shared by the benchmarks.

use ftat_core::math::softmax_rows;
use ftat_core::{Matrix, MlpModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn features(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).expect("shape")
}

/// Rows of random class probabilities.
pub fn predictions(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Matrix {
    softmax_rows(&features(rng, n, k)).expect("finite logits")
}

/// `d → hidden… → k` with He initialization.
pub fn model(rng: &mut ChaCha8Rng, d: usize, hidden: &[usize], k: usize) -> MlpModel {
    let mut dims = vec![d];
    dims.extend(hidden);
    dims.push(k);
    MlpModel::init(&dims, rng).expect("valid dims")
}
