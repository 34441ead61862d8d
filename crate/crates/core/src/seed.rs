//! Counter-based seed derivation.
//!
//! Every random stream in a run is keyed by a tuple of integers (master seed,
//! stream tag, client id, round, epoch, ...), so the draws a client sees do not
//! depend on the order in which clients or runs are executed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Distinct tags keep independent streams from colliding.
pub mod tag {
    pub const INIT: u64 = 1;
    pub const SAMPLER: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const SHUFFLE: u64 = 4;
    pub const CONCEPT: u64 = 5;
    pub const VALIDATION: u64 = 6;
    pub const DOMAIN: u64 = 7;
    pub const MIXTURE: u64 = 8;
    pub const TRAIN: u64 = 9;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into a single 64-bit seed.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x6A09_E667_F3BC_C908, |acc, &p| {
        splitmix64(acc ^ splitmix64(p))
    })
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_of_parts_matters() {
        assert_ne!(derive(&[1, 2]), derive(&[2, 1]));
        assert_eq!(derive(&[7, 3, 9]), derive(&[7, 3, 9]));
        assert_ne!(derive(&[0]), derive(&[0, 0]));
    }
}
