//! Portable seeded randomness for the synthetic generators.
//!
//! The generator is ChaCha8 keyed with the 64-bit seed in little-endian
//! order in the first 8 key bytes (remaining 24 bytes zero), with a 64-bit
//! stream id selecting an independent sequence. Derived quantities:
//!
//! * uniform `[0, 1)`: `(next_u64 >> 11) * 2^-53`
//! * index below `n`: `floor(uniform * n)`
//! * standard normal: Box-Muller cosine branch, `u1 = 1 - uniform`,
//!   `u2 = uniform`, one normal per two draws.
//!
//! Per-image seeds come from [`derive_seed`], the SplitMix64 finalizer
//! applied to `seed + (index + 1) * 0x9E3779B97F4A7C15`.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

pub(crate) const STREAM_SCENE: u64 = 1;
pub(crate) const STREAM_EXPERT: u64 = 2;
pub(crate) const STREAM_PERTURB: u64 = 3;
pub(crate) const STREAM_CONFUSION: u64 = 4;

pub struct SeededRng(ChaCha8Rng);

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&seed.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream);
        SeededRng(rng)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn below(&mut self, n: usize) -> usize {
        ((self.uniform() * n as f64) as usize).min(n.saturating_sub(1))
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Categorical draw proportional to nonnegative `weights`.
    pub fn weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut target = self.uniform() * total;
        for (i, &w) in weights.iter().enumerate() {
            if target < w {
                return i;
            }
            target -= w;
        }
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Seed for item `index` of a collection generated from `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
