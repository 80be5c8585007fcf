//! Deterministic random streams.
//!
//! Every stochastic stage draws from its own ChaCha stream whose seed is a
//! hash of the master seed and a path of stream labels. Work items can then
//! run in any order, on any number of threads, and still see identical draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Stream labels for the pipeline stages.
pub mod label {
    pub const SYNTHETIC: u64 = 0x5359_4e31;
    pub const IMPUTE: u64 = 0x494d_5032;
    pub const BETA_SYN: u64 = 0x4253_594e;
    pub const BOOTSTRAP: u64 = 0x424f_4f54;
    pub const REPLICATE: u64 = 0x5245_504c;
    pub const EXTERNAL: u64 = 0x4558_544c;
    pub const VALIDATION: u64 = 0x5641_4c44;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` and a path of labels.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(master), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(master: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(master, path))
}
