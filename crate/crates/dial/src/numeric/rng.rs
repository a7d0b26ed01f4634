//! Seeded random streams.
//!
//! Every random draw in the crate goes through an `RngStream` seeded from a
//! `u64`, so any run is reproducible from its configuration. Independent
//! parts of a run (dataset, weight init, per-epoch shuffles, holdout split)
//! use sub-seeds derived with `derive_seed` so they do not share state.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::matrix::Matrix;

pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Standard normal draw.
    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform integer in 0..n.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.gen_range(0..n)
    }

    pub fn normal_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.normal())
    }

    pub fn uniform_matrix(&mut self, rows: usize, cols: usize) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| self.uniform())
    }

    /// Uniform random permutation of 0..n (Fisher-Yates).
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// Mixes a base seed with a stream label (splitmix64 finalizer), so streams
/// with different labels are statistically independent.
pub fn derive_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let mut a = RngStream::new(42);
        let mut b = RngStream::new(42);
        let ma = a.normal_matrix(4, 3);
        let mb = b.normal_matrix(4, 3);
        assert_eq!(ma.data(), mb.data());
        assert_eq!(a.permutation(10), b.permutation(10));
    }

    #[test]
    fn different_seeds_differ() {
        let mut a = RngStream::new(1);
        let mut b = RngStream::new(2);
        assert_ne!(a.normal_matrix(2, 2).data(), b.normal_matrix(2, 2).data());
    }

    #[test]
    fn permutation_is_a_bijection() {
        let mut rng = RngStream::new(7);
        for n in [1usize, 2, 5, 100] {
            let mut p = rng.permutation(n);
            p.sort_unstable();
            assert_eq!(p, (0..n).collect::<Vec<_>>());
        }
        assert!(rng.permutation(0).is_empty());
    }

    #[test]
    fn normal_moments_at_1e5() {
        let mut rng = RngStream::new(13);
        let n = 100_000;
        let m = rng.normal_matrix(n, 1);
        let mean: f64 = m.data().iter().sum::<f64>() / n as f64;
        let var: f64 = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "normal mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "normal var {var}");
    }

    #[test]
    fn uniform_moments_at_1e5() {
        let mut rng = RngStream::new(14);
        let n = 100_000;
        let m = rng.uniform_matrix(n, 1);
        let mean: f64 = m.data().iter().sum::<f64>() / n as f64;
        let var: f64 = m.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "uniform mean {mean}");
        assert!((var - 1.0 / 12.0).abs() < 0.02, "uniform var {var}");
        assert!(m.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(1, 0);
        let b = derive_seed(1, 1);
        let c = derive_seed(2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(1, 0));
    }
}
