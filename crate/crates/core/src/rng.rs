//! Seed derivation for independent, reproducible random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Fold a label path into a base seed; each distinct path yields an
/// independent stream.
pub fn derive_seed(base: u64, labels: &[u64]) -> u64 {
    let mut state = splitmix64(base);
    for &l in labels {
        state = splitmix64(state ^ splitmix64(l));
    }
    state
}

pub fn rng_from(base: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, labels))
}
