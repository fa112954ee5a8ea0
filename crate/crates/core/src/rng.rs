//! Seeded uniform streams built on splitmix64, so that test weights and
//! noise initialisations are reproducible across platforms.

use rand_core::{RngCore, SeedableRng};
use rand_xoshiro::SplitMix64;

pub struct UniformStream(SplitMix64);

impl UniformStream {
    pub fn new(seed: u64) -> Self {
        Self(SplitMix64::seed_from_u64(seed))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    /// Uniform in `[0, 1)` from the top 53 bits.
    pub fn next_unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn next_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_unit()
    }
}
