//! Shared fixtures for the criterion benchmarks: deterministic random
//! tensors and a desk-scale model configuration.

use gradgpt_core::{Matrix, ModelConfig, ModelParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Deterministic dense matrix with entries in (-1, 1).
pub fn random_matrix(seed: u64, rows: usize, cols: usize) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

/// The configuration the desk-scale training runs use: d=64, 4 heads of
/// width 16, 2 blocks, byte vocabulary, 64-token context.
pub fn desk_config() -> ModelConfig {
    ModelConfig {
        d: 64,
        n_h: 4,
        d_h: 16,
        d_rho: 16,
        n_blocks: 2,
        n_vocab: 256,
        n_context: 64,
        ..ModelConfig::tiny_fixture()
    }
}

/// Initialized desk-scale parameters (seeded, 64-bit).
pub fn desk_params(seed: u64) -> ModelParams<f64> {
    ModelParams::init(&desk_config(), seed).expect("desk-scale config is valid")
}

/// A deterministic token sequence within the byte vocabulary.
pub fn token_sequence(seed: u64, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(0..256)).collect()
}
