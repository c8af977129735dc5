//! Deterministic randomness helpers.
//!
//! All stochastic behavior (weight init, dropout masks, shuffles, scene
//! sampling) derives from ChaCha8 streams seeded through [`mix`], so every
//! value is a pure function of the run seed plus a stream index. Uniform
//! deviates are built directly from `next_u64`, keeping the byte-level
//! stream stable.

pub use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// splitmix64-style mixer for deriving independent stream seeds:
/// `seed_i = mix(master, i)`.
pub fn mix(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(seed, stream))
}

/// Uniform deviate in [0, 1) with 53 random bits.
pub fn unit_f64(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform deviate in [-s, s).
pub fn uniform_sym(rng: &mut ChaCha8Rng, s: f64) -> f64 {
    s * (2.0 * unit_f64(rng) - 1.0)
}

/// Uniform integer in [0, n).
pub fn below(rng: &mut ChaCha8Rng, n: usize) -> usize {
    debug_assert!(n > 0);
    (unit_f64(rng) * n as f64) as usize % n
}

/// In-place Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut ChaCha8Rng, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}
