//! Deterministic seed derivation so that every random stream is a pure
//! function of the run seed and its position in the run.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn rng_for(base: u64, parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, parts))
}

// stream tags
pub(crate) const STREAM_SHUFFLE: u64 = 1;
pub(crate) const STREAM_OBJECTIVE: u64 = 2;
pub(crate) const STREAM_EXAMPLE: u64 = 3;
pub(crate) const STREAM_EVAL: u64 = 4;
pub(crate) const STREAM_HEAD_INIT: u64 = 5;
