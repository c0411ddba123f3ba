//! Seeded random streams.
//!
//! Every consumer of randomness draws from its own ChaCha8 stream keyed by
//! `(seed, purpose, index)`, so adding or removing draws in one place never
//! shifts the numbers seen anywhere else.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// What a stream is used for. The discriminant is part of the stream id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Dataset = 1,
    Partition = 2,
    Schedule = 3,
    ModelInit = 4,
    Selection = 5,
    LocalTraining = 6,
    Fisher = 7,
    Memory = 8,
    Resources = 9,
}

/// Returns the stream for `purpose` and a purpose-local `index` (round, client, ...).
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> SimRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // 8 bits of purpose, 56 bits of index.
    rng.set_stream(((purpose as u64) << 56) | (index & ((1 << 56) - 1)));
    rng
}

/// Packs two small indices into one stream index.
pub fn pair(a: u64, b: u64) -> u64 {
    (a << 28) | (b & ((1 << 28) - 1))
}
