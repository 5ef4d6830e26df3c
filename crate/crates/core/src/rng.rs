//! Seeded randomness.
//!
//! Every random draw in the crate goes through [`SeededRng`], a ChaCha8
//! stream keyed by a 64-bit seed. ChaCha output is specified bit-for-bit,
//! so a seed yields the same sequence on every platform. The full state is
//! `(seed, stream, word position)`, which is what checkpoints persist.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct SeededRng {
    inner: ChaCha8Rng,
    seed: u64,
}

/// Serializable position of a [`SeededRng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Independent generator for a named sub-task (same seed, another stream).
    pub fn fork(seed: u64, stream: u64) -> Self {
        let mut r = Self::new(seed);
        r.inner.set_stream(stream);
        r
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut r = Self::new(state.seed);
        r.inner.set_stream(state.stream);
        r.inner.set_word_pos(state.word_pos);
        r
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in the open interval `(0, 1)`.
    pub fn uniform_open(&mut self) -> f64 {
        loop {
            let u = self.uniform();
            if u > 0.0 {
                return u;
            }
        }
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`; `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        self.inner.random_range(0..n)
    }

    /// Raw 64-bit draw, used to key per-item generators.
    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    pub fn coin(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Random permutation of `0..n` with no fixed points (identity when `n < 2`).
    pub fn derangement(&mut self, n: usize) -> Vec<usize> {
        if n < 2 {
            return (0..n).collect();
        }
        // Sattolo's algorithm: a uniformly random n-cycle, hence fixed-point free.
        let mut p: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i);
            p.swap(i, j);
        }
        p
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
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn known_first_draws_are_stable() {
        // Frozen from the ChaCha8 stream; guards against silent generator changes.
        let mut r = SeededRng::new(7);
        let first: Vec<usize> = (0..5).map(|_| r.below(1000)).collect();
        assert_eq!(first, [140, 157, 182, 167, 270]);
        assert_eq!(SeededRng::new(7).uniform().to_bits(), 4594853223840476064);
    }

    #[test]
    fn state_round_trip_resumes_sequence() {
        let mut a = SeededRng::new(9);
        for _ in 0..37 {
            a.normal();
        }
        let mut b = SeededRng::from_state(a.state());
        for _ in 0..50 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        let mut r = SeededRng::new(3);
        for n in 2..20 {
            let p = r.derangement(n);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &v)| i != v));
        }
    }
}
