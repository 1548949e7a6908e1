//! Seed derivation. Every stochastic stream in a run is keyed by the run
//! seed plus a small tuple, so results never depend on scheduling order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mix a base seed with a list of keys into a new 64-bit seed.
pub fn derive_seed(base: u64, keys: &[u64]) -> u64 {
    keys.iter().fold(splitmix(base), |acc, &k| splitmix(acc ^ splitmix(k)))
}

pub fn rng_from(base: u64, keys: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, keys))
}

// stream tags
pub(crate) const TAG_INIT_POLICY: u64 = 1;
pub(crate) const TAG_INIT_VALUE: u64 = 2;
pub(crate) const TAG_INIT_DECODER: u64 = 3;
pub(crate) const TAG_CONTEXTS: u64 = 4;
pub(crate) const TAG_EPISODE: u64 = 5;
pub(crate) const TAG_RANDOM_REWARD: u64 = 6;
pub(crate) const TAG_EVAL: u64 = 7;
