//! Seed derivation for independent, reproducible random streams.
//!
//! Every consumer of randomness (partitioning, per-client training, attacker
//! collusion, client sampling) gets its own ChaCha stream keyed by the global
//! seed plus a list of tags. Streams never depend on execution order, so
//! serial and parallel runs see identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Stream tags, one per consumer of randomness.
pub mod tag {
    pub const DATA: u64 = 0x01;
    pub const PARTITION: u64 = 0x02;
    pub const INIT: u64 = 0x03;
    pub const SAMPLING: u64 = 0x04;
    pub const SERVER: u64 = 0x05;
    pub const CLIENT: u64 = 0x06;
    pub const COLLUDE: u64 = 0x07;
    pub const QUANT: u64 = 0x08;
    pub const SPLIT: u64 = 0x09;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives a 64-bit seed from a base seed and a tag path.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(seed), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

/// Opens the stream identified by `(seed, tags)`.
pub fn stream(seed: u64, tags: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive_seed(seed, tags))
}
