//! Deterministic inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simfair::losses::LocationId;
use simfair::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `rows x cols` tensor of uniform values in `[-1, 1)`.
pub fn uniform(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..rows * cols).map(|_| r.gen_range(-1.0..1.0)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

/// Location ids, predictions and truths for `rows` rows spread over
/// `locations` stations.
pub fn scored_rows(
    rows: usize,
    locations: u32,
    seed: u64,
) -> (Vec<LocationId>, Vec<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let locs = (0..rows).map(|i| i as u32 % locations).collect();
    let truth: Vec<f64> = (0..rows).map(|_| r.gen_range(260.0..310.0)).collect();
    let pred = truth.iter().map(|t| t + r.gen_range(-2.0..2.0)).collect();
    (locs, pred, truth)
}

/// States spread uniformly inside `bounds`.
pub fn states(bounds: &[(f64, f64)], n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| bounds.iter().map(|&(lo, hi)| r.gen_range(lo..hi)).collect())
        .collect()
}
