//! Seed derivation for independent random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream identifiers.
pub mod stream {
    pub const SOLAR: u64 = 1;
    pub const LEARNER: u64 = 2;
    pub const SESSIONS_PRE: u64 = 3;
    pub const SESSIONS_POST: u64 = 4;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes the master seed with a cell key, a stream id, and an index.
pub fn derive_seed(master: u64, cell: u64, stream: u64, index: u64) -> u64 {
    [cell, stream, index]
        .into_iter()
        .fold(splitmix64(master), |acc, part| splitmix64(acc ^ splitmix64(part)))
}

pub fn stream_rng(master: u64, cell: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, cell, stream, index))
}
