//! Deterministic random-number streams.
//!
//! Every consumer of randomness (a chain, a replicate, a posterior draw in
//! dynamic prediction) gets its own ChaCha stream keyed by the master seed
//! and a path of integer tags, so results never depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Stream for `seed` along the tag path `path`.
pub fn stream(seed: u64, path: &[u64]) -> StreamRng {
    let mut state = seed;
    let mut acc = splitmix64(&mut state);
    for &tag in path {
        state ^= tag.wrapping_mul(0xD1B5_4A32_D192_ED03).wrapping_add(acc);
        acc = splitmix64(&mut state);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Tags used to separate the top-level purposes of randomness.
pub mod tags {
    pub const CHAIN: u64 = 1;
    pub const INIT: u64 = 2;
    pub const REPLICATE: u64 = 3;
    pub const GENERATE: u64 = 4;
    pub const PREDICT: u64 = 5;
    pub const SUBJECT: u64 = 6;
    pub const VARIABLE: u64 = 7;
    pub const SCORES: u64 = 8;
}
