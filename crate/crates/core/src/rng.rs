//! Seeded pseudo-randomness with a fixed, documented algorithm so interleaver
//! tables, initial weights and epoch orders can be reproduced bit-for-bit in
//! any language.
//!
//! Generator: SplitMix64. The state advances by `0x9E3779B97F4A7C15` and each
//! output is the state passed through the finalizer
//!
//! ```text
//! x ^= x >> 30; x *= 0xBF58476D1CE4E5B9;
//! x ^= x >> 27; x *= 0x94D049BB133111EB;
//! x ^= x >> 31;
//! ```
//!
//! Derived quantities:
//! - `below(n)`: rejection sampling on the full 64-bit output; values at or
//!   above `u64::MAX - u64::MAX % n` are discarded, the rest reduced mod `n`.
//! - `unit_f64()`: `(next_u64() >> 11) * 2^-53`, in `[0, 1)`.
//! - `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.
//! - `derive_seed(seed, stream)`: `mix(seed + (stream + 1) * GOLDEN)`, used to
//!   split one user seed into independent streams.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix(mut x: u64) -> u64 {
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed for an independent sub-stream (a column, a junction, an epoch).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix(seed.wrapping_add(stream.wrapping_add(1).wrapping_mul(GOLDEN)))
}

#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix(self.state)
    }

    /// Uniform integer in `[0, n)`. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let limit = u64::MAX - u64::MAX % n;
        loop {
            let x = self.next_u64();
            if x < limit {
                return x % n;
            }
        }
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.below(n as u64) as usize
    }

    pub fn unit_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `[-r, r)`.
    pub fn symmetric(&mut self, r: f64) -> f64 {
        (2.0 * self.unit_f64() - 1.0) * r
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}
