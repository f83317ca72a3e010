//! Derivation of independent RNG streams from a run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Mixes a base seed with a sequence of stream labels (splitmix64 finalizer).
pub fn derive(seed: u64, labels: &[u64]) -> u64 {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &l in labels {
        h = mix(h ^ mix(l.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    mix(h)
}

fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, labels))
}

/// Stream labels, so unrelated consumers of one seed never collide.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const ATTACK: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const EVAL: u64 = 5;
    pub const DATA: u64 = 6;
    pub const MIX_SET: u64 = 7;
    pub const CORRUPT: u64 = 8;
}
