//! Deterministic random streams.
//!
//! Every stochastic routine in the crate takes a [`Stream`]; parallel or
//! repeated work derives child streams from a root seed plus integer tags,
//! so a run is fully reproducible from a single `u64` seed.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// splitmix64 finalizer, used to decorrelate derived seeds.
fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Mix a root seed with a sequence of tags into a child seed.
pub fn derive_seed(root: u64, tags: &[u64]) -> u64 {
    let mut s = splitmix(root);
    for &t in tags {
        s = splitmix(s ^ t.wrapping_mul(0xd6e8_feb8_6659_fd93));
    }
    s
}

/// A seeded random stream (ChaCha8 underneath).
#[derive(Clone, Debug)]
pub struct Stream {
    rng: ChaCha8Rng,
    cached_normal: Option<f64>,
}

impl Stream {
    pub fn new(seed: u64) -> Self {
        Stream {
            rng: ChaCha8Rng::seed_from_u64(seed),
            cached_normal: None,
        }
    }

    /// Child stream for tagged subtasks (e.g. per batch example).
    pub fn derive(root: u64, tags: &[u64]) -> Self {
        Stream::new(derive_seed(root, tags))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        // 53-bit uniform is plenty for the small ranges used here.
        (self.uniform() * n as f64) as usize % n
    }

    /// Standard normal via Box-Muller (pairs cached).
    pub fn normal(&mut self) -> f64 {
        if let Some(v) = self.cached_normal.take() {
            return v;
        }
        let mut u1 = self.uniform();
        while u1 == 0.0 {
            u1 = self.uniform();
        }
        let u2 = self.uniform();
        let r = crate::math::sqrt(-2.0 * crate::math::ln(u1));
        let theta = 2.0 * core::f64::consts::PI * u2;
        self.cached_normal = Some(r * crate::math::sin(theta));
        r * crate::math::cos(theta)
    }

    /// Sample an index from an (unnormalized is fine) probability vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible() {
        let mut a = Stream::new(7);
        let mut b = Stream::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
    }

    #[test]
    fn derived_streams_differ_by_tag() {
        let mut a = Stream::derive(7, &[0]);
        let mut b = Stream::derive(7, &[1]);
        assert_ne!(a.next_u64(), b.next_u64());
    }

    #[test]
    fn normal_moments() {
        let mut s = Stream::new(42);
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let v = s.normal();
            sum += v;
            sq += v * v;
        }
        let mean = sum / n as f64;
        let var = sq / n as f64 - mean * mean;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.02, "var {var}");
    }

    #[test]
    fn categorical_respects_zero_weight() {
        let mut s = Stream::new(1);
        for _ in 0..1000 {
            let i = s.categorical(&[0.5, 0.0, 0.5]);
            assert_ne!(i, 1);
        }
    }
}
