//! Seed derivation.
//!
//! All randomness flows from a single 64-bit base seed. Streams are derived
//! with the SplitMix64 finalizer and fed to ChaCha8, which produces the same
//! sequence on every platform. Derivation is positional: a stream depends
//! only on `(seed, index, purpose)`, never on the order in which work is
//! scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Purpose tags for per-trial substreams.
pub mod purpose {
    pub const SPLIT: u64 = 0x5350_4c49_5400_0001;
    pub const RANDOM_MATCH: u64 = 0x524d_4154_4348_0002;
    pub const RANDOM_FACTOR: u64 = 0x5546_4143_5400_0003;
    pub const SAMPLE: u64 = 0x5341_4d50_4c45_0004;
    pub const CLUSTER: u64 = 0x434c_5553_5400_0005;
}

/// SplitMix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a seed with a stream index into a new, well-mixed seed.
#[inline]
pub fn mix64(seed: u64, index: u64) -> u64 {
    splitmix64(splitmix64(seed) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

pub fn stream(seed: u64, index: u64) -> Rng {
    Rng::seed_from_u64(mix64(seed, index))
}

/// Substream of trial `trial` of an experiment seeded with `base_seed`.
pub fn trial_stream(base_seed: u64, trial: usize, purpose: u64) -> Rng {
    stream(mix64(base_seed, trial as u64), purpose)
}
