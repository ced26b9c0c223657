//! Deterministic input builders shared by the criterion benchmarks.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fedrec_core::dataset::{
    build_client_registry, leave_one_out_split, synthetic_clustered, ClientRegistry, SyntheticSpec,
};
use fedrec_core::Result;

/// `n` dense update vectors of length `d`, uniform in [-1, 1).
pub fn random_updates(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

/// A dense `rows x cols` matrix, uniform in [-0.5, 0.5).
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.5..0.5))
}

/// Plain `Vec<Vec<f64>>` feature rows for the PCA benchmark.
pub fn random_rows(rows: usize, cols: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-0.5..0.5)).collect())
        .collect()
}

/// A small clustered dataset with its client registry, sized so a full
/// federated epoch stays in the tens of milliseconds.
pub fn bench_registry(users: usize, items: usize, seed: u64) -> Result<(ClientRegistry, usize)> {
    let spec = SyntheticSpec {
        users,
        items,
        clusters: 5,
        profile_min: 6,
        profile_max: 12,
        noise: 0.1,
        popularity: 1.0,
    };
    let log = synthetic_clustered(&spec, seed)?;
    let splits = leave_one_out_split(&log)?;
    let registry = build_client_registry(&splits, 0.1, 4, seed)?;
    Ok((registry, log.item_count))
}
