//! Seeded randomness.
//!
//! Every stochastic operation in the crate draws from a [`SeededRng`]. The
//! generator is ChaCha8 with a 64-bit seed, and independent sub-streams are
//! derived with [`SeededRng::substream`] so that parallel work never shares a
//! generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numerics::Matrix;

/// Identifier recorded in manifests so a stream can be reproduced later.
pub const RNG_ALGORITHM: &str = "chacha8-v1";

#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent generator for sub-task `stream` of this seed.
    pub fn substream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Standard normal via Box-Muller; fixed here so samples never depend on
    /// a distribution crate's algorithm choice.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1]
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Exponential(1) draw, used to build Dirichlet(1) rows.
    pub fn exponential(&mut self) -> f64 {
        -(1.0 - self.uniform()).ln()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `count` distinct indices from `0..n`, in sampling order.
    pub fn sample_indices(&mut self, n: usize, count: usize) -> Vec<usize> {
        assert!(count <= n, "cannot sample {count} of {n}");
        rand::seq::index::sample(&mut self.inner, n, count).into_vec()
    }

    pub fn gaussian_matrix(&mut self, rows: usize, cols: usize, std: f64) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal() * std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_sequence() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        assert_eq!(a.normal().to_bits(), b.normal().to_bits());
    }

    #[test]
    fn substreams_differ() {
        let mut a = SeededRng::substream(7, 0);
        let mut b = SeededRng::substream(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn pinned_first_draw() {
        const PINNED: u64 = 13_080_132_717_333_068_652;
        // Regression anchor for the versioned algorithm.
        let mut rng = SeededRng::new(0);
        assert_eq!(rng.next_u64(), PINNED);
        assert_eq!(RNG_ALGORITHM, "chacha8-v1");
    }

    #[test]
    fn normal_moments_are_plausible() {
        let mut rng = SeededRng::new(3);
        let xs: Vec<f64> = (0..20_000).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03);
        assert!((var - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampled_indices_are_distinct() {
        let mut rng = SeededRng::new(1);
        let mut idx = rng.sample_indices(50, 20);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 20);
    }
}
