//! Seeded synthetic matrices for tests, benchmarks and `--self-check`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian_matrix(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut rng))
}

/// Product of two Gaussian factors; rank `rank` almost surely.
pub fn low_rank_matrix(rows: usize, cols: usize, rank: usize, seed: u64) -> DMatrix<f64> {
    gaussian_matrix(rows, rank, seed) * gaussian_matrix(rank, cols, seed.wrapping_add(0x9e37_79b9))
}

/// `rows × cols` matrix with orthonormal columns (`rows >= cols`).
pub fn orthonormal_columns(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
    assert!(rows >= cols);
    gaussian_matrix(rows, cols, seed).qr().q()
}
