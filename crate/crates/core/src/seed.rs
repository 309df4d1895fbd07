//! Seed derivation. Every random stream in the simulator is keyed by the
//! experiment seed plus a small tuple of integers naming its purpose, so
//! results do not depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const DATA_TEMPLATE: u64 = 2;
    pub const DATA_NOISE: u64 = 3;
    pub const PARTITION: u64 = 4;
    pub const SELECT: u64 = 5;
    pub const LOCAL_SHUFFLE: u64 = 6;
    pub const SERVER_PROBE: u64 = 7;
    pub const LIPSCHITZ: u64 = 8;
    pub const CALIBRATION: u64 = 9;
    pub const SPLIT: u64 = 10;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into a new 64-bit seed.
pub fn derive(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(seed, path))
}
