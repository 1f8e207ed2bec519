//! Seeded randomness. Every stochastic path in the crate draws from a
//! SplitMix64 stream derived from one `u64` seed.

use rand::SeedableRng;
pub use rand_xoshiro::SplitMix64;

pub fn seeded(seed: u64) -> SplitMix64 {
    SplitMix64::seed_from_u64(seed)
}

/// Independent sub-stream for a named purpose, so adding draws to one
/// consumer does not shift another.
pub fn substream(seed: u64, stream: u64) -> SplitMix64 {
    // golden-ratio increment keeps nearby (seed, stream) pairs far apart
    seeded(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
}
