//! Seed hierarchy: every random stream in a run is derived from the master
//! seed plus a purpose tag and indices, so streams never interfere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SimRng = ChaCha8Rng;

/// Purpose tags for derived streams.
pub mod tag {
    pub const DATA: u64 = 1;
    pub const HOLDOUT: u64 = 2;
    pub const PROXY: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const MASK: u64 = 5;
    pub const INIT_MODEL: u64 = 6;
    pub const INIT_GENERATOR: u64 = 7;
    pub const SHUFFLE: u64 = 8;
    pub const GEN_LABELS: u64 = 9;
    pub const RANDOM_FILL: u64 = 10;
    pub const SELECT: u64 = 11;
    pub const PROBE: u64 = 12;
    pub const KMEANS: u64 = 13;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes `parts` into `master`, one splitmix round per part.
pub fn derive(master: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(master: u64, parts: &[u64]) -> SimRng {
    SimRng::seed_from_u64(derive(master, parts))
}
