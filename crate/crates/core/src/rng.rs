//! Seeded random streams.
//!
//! Every stochastic component draws from a ChaCha8 generator keyed by a root
//! seed and a stream name. The ChaCha key comes from the root seed
//! (`seed_from_u64`) and the 64-bit stream id is the FNV-1a hash of the name,
//! so streams with different names never overlap and the mapping is identical
//! on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Names of the streams used across the crate. Recorded in seed manifests.
pub mod streams {
    pub const POOL: &str = "data/pool";
    pub const POOL_NOISE: &str = "data/pool-noise";
    pub const TEST: &str = "data/test";
    pub const TEST_NOISE: &str = "data/test-noise";
    pub const SEED_SET: &str = "data/seed-set";
    pub const GFN_INIT: &str = "gfn/init";
    pub const GFN_TRAIN: &str = "gfn/train";
    pub const GFN_SAMPLE: &str = "gfn/sample";
    pub const GP: &str = "gp";
    pub const STRATEGY: &str = "strategy";
    pub const LOOKAHEAD: &str = "lookahead";

    pub const ALL: &[&str] = &[
        POOL, POOL_NOISE, TEST, TEST_NOISE, SEED_SET, GFN_INIT, GFN_TRAIN, GFN_SAMPLE, GP,
        STRATEGY, LOOKAHEAD,
    ];
}

pub fn stream_id(name: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    name.bytes()
        .fold(OFFSET, |h, b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

/// Generator for the named stream under `root`.
pub fn stream(root: u64, name: &str) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root);
    rng.set_stream(stream_id(name));
    rng
}

/// Generator for a named stream that is further split by an integer (a seed
/// replica, an AL step, a lookahead round).
pub fn substream(root: u64, name: &str, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    rng.set_stream(stream_id(name));
    rng
}
