//! Keyed random streams.
//!
//! Every random quantity is drawn from a ChaCha stream selected by
//! `(seed, purpose)`, so teachers, designs and noise can be regenerated
//! independently of each other and of the order in which work is scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Purpose tags for the independent streams.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Teacher = 1,
    Design = 2,
    Noise = 3,
    TestSet = 4,
    MonteCarlo = 5,
    Ridge = 6,
    TestNoise = 7,
}

/// SplitMix64 finalizer, used to fold several integers into one seed.
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a child seed from a parent seed and a key.
pub fn derive(seed: u64, key: u64) -> u64 {
    mix(mix(seed) ^ key.rotate_left(17))
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// Stream keyed by an additional integer (e.g. the bit pattern of an alpha value).
pub fn keyed_stream(seed: u64, purpose: Purpose, key: u64) -> ChaCha8Rng {
    stream(derive(seed, key), purpose)
}
