//! Seed derivation for reproducible, parallelizable sampling.
//!
//! Generators across the crate take a 64-bit seed. Independent streams
//! (per-sample, per-step) derive their seeds through a splittable counter
//! scheme so samples can be produced in any order, or in parallel, without
//! changing the result.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer. Good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the seed for stream `stream`, element `index` from a master seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ stream.wrapping_mul(0xa076_1d64_78bd_642f)) ^ index)
}

/// Deterministic RNG for a derived seed.
pub fn rng_for(master: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Stream identifiers used by the pipeline. Collected here so no two
/// call sites collide.
pub mod streams {
    pub const MONDRIAN: u64 = 1;
    pub const PERLIN: u64 = 2;
    pub const GLOSS: u64 = 3;
    pub const SAMPLE: u64 = 4;
    pub const SCENE: u64 = 5;
    pub const MODEL_INIT: u64 = 6;
    pub const PAIRS: u64 = 7;
    pub const TRAIN: u64 = 8;
}
