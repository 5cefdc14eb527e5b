//! Deterministic seed derivation.
//!
//! Every source of randomness (fold shuffles, data generation, bootstrap
//! replicates, Monte-Carlo replications) draws from its own substream whose
//! seed is derived from a root seed and a purpose tag. Results are therefore
//! independent of scheduling: a replicate computed on any thread, in any
//! order, sees the same stream.

use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;

/// Purpose tags keep substreams for different pipeline stages disjoint.
pub mod tag {
    pub const CV_FOLDS: u64 = 0x6376;
    pub const BOOTSTRAP: u64 = 0x626f;
    pub const REPLICATION: u64 = 0x7265;
    pub const DGP: u64 = 0x6467;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive the seed of substream `index` under `tag` from a root seed.
pub fn derive_seed(root: u64, tag: u64, index: u64) -> u64 {
    splitmix64(root ^ splitmix64(tag.wrapping_add(splitmix64(index))))
}

/// RNG for a derived substream.
pub fn substream(root: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, index))
}
