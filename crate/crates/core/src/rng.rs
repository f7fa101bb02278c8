//! Seed derivation. Every stochastic process gets its own stream so that
//! changing one knob (say TBLER) leaves the others' draws untouched.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Named random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Arrivals = 2,
    Channel = 3,
    Csi = 4,
    Erasure = 5,
    Leader = 6,
    Follower = 7,
    UeCount = 8,
    Shuffle = 9,
    Params = 10,
    Baseline = 11,
}

/// splitmix64 finalizer.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

pub fn stream(seed: u64, which: Stream, index: u64) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, &[which as u64, index]))
}
