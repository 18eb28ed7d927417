//! Counter-based seed derivation.
//!
//! Every random stream (a user's history, an epoch's negatives, a probe) is
//! keyed by `(seed, labels...)`, so sharding work never changes the draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(splitmix64(seed), |acc, &l| splitmix64(acc ^ splitmix64(l)))
}

pub fn stream(seed: u64, labels: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, labels))
}

// Stream labels.
pub const PINS: u64 = 1;
pub const USERS: u64 = 2;
pub const INIT: u64 = 3;
pub const BATCHES: u64 = 4;
pub const NEGATIVES: u64 = 5;
pub const RANKER: u64 = 6;
pub const PROBE: u64 = 7;
pub const GRADCHECK: u64 = 8;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_separate_streams() {
        assert_ne!(derive_seed(1, &[USERS, 0]), derive_seed(1, &[USERS, 1]));
        assert_ne!(derive_seed(1, &[USERS, 0]), derive_seed(2, &[USERS, 0]));
        assert_eq!(derive_seed(9, &[PINS]), derive_seed(9, &[PINS]));
    }
}
