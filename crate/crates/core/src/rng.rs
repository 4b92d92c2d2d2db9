//! Seeded random streams.
//!
//! Every stochastic decision draws from a stream derived from the run seed and
//! a small tuple of coordinates (iteration, prompt slot, purpose). Streams are
//! independent of evaluation order, so parallel rollouts stay reproducible.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const PURPOSE_ROLLOUT: u64 = 1;
pub const PURPOSE_SHUFFLE: u64 = 2;
pub const PURPOSE_MINIBATCH: u64 = 3;
pub const PURPOSE_REFILL: u64 = 4;
pub const PURPOSE_SPLIT: u64 = 5;
pub const PURPOSE_DATASET: u64 = 6;
pub const PURPOSE_EVAL: u64 = 7;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream from `seed` and an ordered list of coordinates.
pub fn stream(seed: u64, coords: &[u64]) -> StreamRng {
    let mut h = splitmix64(seed);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x632B_E59B_D9B4_E019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}
