//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha8 generator seeded with a
//! `u64` and a stream id, so two components never share a sequence and a
//! whole experiment is reproducible from its global seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids used across the crate.
pub mod stream {
    pub const SCENE_LAYOUT: u64 = 1;
    pub const SCENE_HOST: u64 = 2;
    pub const SCENE_DONOR: u64 = 3;
    pub const SCENE_NOISE: u64 = 4;
    pub const SPLIT: u64 = 10;
    pub const BALANCE: u64 = 11;
    pub const INIT: u64 = 20;
    pub const SHUFFLE: u64 = 30;
    pub const DROPOUT: u64 = 31;
    pub const MARGIN_SUBSET: u64 = 40;
}

pub fn rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derives an independent child seed (splitmix64 finalizer over both words).
pub fn derive(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
