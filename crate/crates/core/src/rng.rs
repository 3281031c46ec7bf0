//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit generator so that a run is a
//! pure function of its seed. Independent sub-streams are derived by mixing a
//! parent seed with a tag.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SimRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// SplitMix64 finaliser; used to decorrelate derived seeds.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix(seed ^ mix(tag.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn derived(seed: u64, tag: u64) -> SimRng {
    seeded(derive_seed(seed, tag))
}
