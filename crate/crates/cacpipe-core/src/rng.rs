//! Seeded RNG construction and stream derivation.
//!
//! Every stochastic step in the pipeline (phantom sampling, weight init,
//! mini-batch draws, crop offsets) owns a ChaCha stream derived from the run
//! seed and a fixed stream id, so any component can be re-run in isolation and
//! reproduce its draws exactly.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a stream id into an independent 64-bit seed.
///
/// SplitMix64 finalizer; changing either input by one bit decorrelates the
/// output stream.
pub fn mix_seed(base: u64, stream: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9e3779b97f4a7c15)
        .wrapping_add(stream.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// ChaCha8 generator for the given seed. Identical on every platform.
pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
