//! Seeded fixtures shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` points of dimension `dim` with coordinates uniform in `[-scale, scale]`.
pub fn random_points(n: usize, dim: usize, scale: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..=scale)).collect())
        .collect()
}

/// Points strictly inside the unit ball.
pub fn random_ball_points(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    random_points(n, dim, 0.9 / (dim as f64).sqrt(), seed)
}
