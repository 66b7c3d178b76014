//! Seeded, splittable random source.
//!
//! A thin wrapper over ChaCha8 so that every experiment draws from one seed
//! and derives independent per-context streams without sharing state.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// An independent stream keyed by `(seed, index)`. Does not advance `self`,
    /// so stream `k` is the same no matter how many other streams were taken.
    pub fn substream(&self, index: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        // stream 0 is the parent itself
        inner.set_stream(index.wrapping_add(1));
        Rng {
            seed: self.seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17),
            inner,
        }
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Index drawn from `probs` (assumed to sum to one) by inverting the CDF.
    pub fn categorical(&mut self, probs: &[f64]) -> usize {
        let u = self.uniform();
        let mut acc = 0.0;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return i;
            }
        }
        // rounding left u above the final partial sum
        probs.iter().rposition(|p| *p > 0.0).unwrap_or(probs.len() - 1)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = Rng::new(42);
        let mut b = Rng::new(42);
        for _ in 0..10_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn substreams_are_independent_of_parent_position() {
        let parent = Rng::new(7);
        let mut advanced = parent.clone();
        for _ in 0..100 {
            advanced.uniform();
        }
        let mut s1 = parent.substream(3);
        let mut s2 = advanced.substream(3);
        assert_eq!(s1.next_u64(), s2.next_u64());
        let mut other = parent.substream(4);
        let mut s3 = parent.substream(3);
        assert_ne!(s3.next_u64(), other.next_u64());
    }

    #[test]
    fn categorical_point_mass() {
        let mut r = Rng::new(1);
        for _ in 0..100 {
            assert_eq!(r.categorical(&[0.0, 0.0, 1.0, 0.0]), 2);
        }
    }
}
