//! Deterministic seed derivation.
//!
//! Every stochastic step (episode sampling, attack initialisation, view
//! generation) draws from its own `ChaCha8Rng` keyed by a seed derived from the
//! run seed plus a path of integer tags, so results do not depend on the
//! order in which tasks are processed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t)))
}

pub fn rng_for(base: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stream tags, so that different consumers of one task seed never collide.
pub mod stream {
    pub const EPISODE: u64 = 1;
    pub const INNER_ATTACK: u64 = 2;
    pub const OUTER_ATTACK: u64 = 3;
    pub const VIEWS: u64 = 4;
    pub const EVAL_ATTACK: u64 = 5;
    pub const TEST_FT_ATTACK: u64 = 6;
    pub const CL_ATTACK: u64 = 7;
}
