//! Deterministic RNG substreams.
//!
//! Every stochastic component draws from a `ChaCha8Rng` seeded by mixing a
//! master seed with structural indices (session number, epoch, query
//! position). Streams are therefore independent of iteration order and worker
//! count: generating session `i` always consumes the same randomness no
//! matter which thread produced it.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer; decorrelates structured seed inputs.
#[inline]
pub fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Combine a seed with a stream label and index into a fresh substream seed.
#[inline]
pub fn substream_seed(master: u64, label: u64, index: u64) -> u64 {
    mix(mix(master ^ label.rotate_left(32)).wrapping_add(index))
}

/// A fresh deterministic RNG for (`master`, `label`, `index`).
pub fn substream(master: u64, label: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(master, label, index))
}

/// Stream labels; fixed constants so layouts never collide accidentally.
pub mod labels {
    pub const SESSION: u64 = 0x01;
    pub const EPOCH: u64 = 0x02;
    pub const VALIDATION: u64 = 0x03;
    pub const EVAL: u64 = 0x04;
    pub const SUBSAMPLE: u64 = 0x05;
    pub const INIT: u64 = 0x06;
    pub const DATAGEN: u64 = 0x07;
}
