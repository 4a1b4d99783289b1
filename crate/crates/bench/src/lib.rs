//! Fixtures shared by the benchmarks.

use nrccr_core::corpus::{build_dataset, Dataset, WorldConfig};
use nrccr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).expect("finite")
}

/// The default world with its splits cut to 64/32/32 videos.
pub fn bench_dataset() -> Dataset {
    let world = WorldConfig { train_videos: 64, val_videos: 32, test_videos: 32, ..WorldConfig::default() };
    build_dataset(&world).expect("valid world").1
}

/// Query-by-item scores and per-query relevant items shaped like a
/// caption-to-video evaluation.
pub fn retrieval_problem(queries: usize, items: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..queries).map(|_| (0..items).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let relevance = (0..queries).map(|q| vec![q % items]).collect();
    (scores, relevance)
}
