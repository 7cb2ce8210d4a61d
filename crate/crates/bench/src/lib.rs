//! Fixtures shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spp_core::nn::{self, Batch, ModelState};

/// Uniform `[0, 1)` inputs with labels cycling through `classes`.
pub fn random_batch(rows: usize, width: usize, classes: usize, seed: u64) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs = Array2::from_shape_simple_fn((rows, width), || rng.random::<f64>());
    let labels = (0..rows).map(|i| i % classes).collect();
    Batch::new(inputs, labels, 0).expect("valid batch")
}

/// Single-head MLP with the given layer sizes.
pub fn model(layers: &[usize], seed: u64) -> ModelState {
    nn::init_model(layers, seed).expect("valid layers")
}

/// Histogram-shaped polyline of `n` points.
pub fn polyline(n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|i| (i as f64, rng.random::<f64>())).collect()
}
