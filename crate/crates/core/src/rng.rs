//! Seeded sampling shared by every module.
//!
//! All randomness goes through ChaCha8 seeded with `seed_from_u64`, and all
//! draws use `Rng::random_range`. Changing either changes every sampled
//! dataset, so the algorithm name is also written into configs and manifests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PRNG_ALGORITHM: &str = "chacha8";

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draws `size` distinct indices from `0..n` by partial Fisher-Yates.
/// The returned order is the draw order.
pub fn sample_indices(n: usize, size: usize, seed: u64) -> Vec<usize> {
    assert!(size <= n, "sample size {size} exceeds population {n}");
    let mut rng = seeded(seed);
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..size {
        let j = rng.random_range(i..n);
        pool.swap(i, j);
    }
    pool.truncate(size);
    pool
}

/// Full permutation of `0..n`.
pub fn permutation(n: usize, seed: u64) -> Vec<usize> {
    sample_indices(n, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn sample_is_distinct_and_deterministic() {
        let a = sample_indices(100, 40, 7);
        let b = sample_indices(100, 40, 7);
        assert_eq!(a, b);
        assert_eq!(a.iter().collect::<HashSet<_>>().len(), 40);
        assert!(a.iter().all(|&i| i < 100));
        assert_ne!(a, sample_indices(100, 40, 8));
    }

    #[test]
    fn empty_sample() {
        assert!(sample_indices(5, 0, 1).is_empty());
        assert!(permutation(0, 1).is_empty());
    }
}
