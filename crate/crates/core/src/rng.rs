//! Counter-based stream splitting.
//!
//! Every random draw in the pipeline comes from a ChaCha stream keyed by the
//! user seed plus a path of counters (domain, step, row, ...). Streams never
//! share state, so results do not depend on evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod domain {
    pub const CODEBOOK: u64 = 1;
    pub const BATCH: u64 = 2;
    pub const CORRUPT: u64 = 3;
    pub const INIT: u64 = 4;
    pub const SAMPLE: u64 = 5;
    pub const LOSS: u64 = 6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive an independent generator for `seed` and a counter path.
pub fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut key = [0u8; 32];
    let mut h = splitmix64(seed);
    for &p in path {
        h = splitmix64(h ^ splitmix64(p.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    for chunk in key.chunks_mut(8) {
        h = splitmix64(h);
        chunk.copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
