//! Deterministic seed derivation.
//!
//! Every random stream is a ChaCha generator seeded from a root seed and a
//! path of indices (domain tag, step, episode, ...), so episodes can be
//! generated in any order or in parallel without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod domain {
    pub const INIT: u64 = 0x1;
    pub const TRAIN: u64 = 0x2;
    pub const EVAL: u64 = 0x3;
    pub const CENTERS: u64 = 0x4;
    pub const EXAMPLE: u64 = 0x5;
    pub const MONTE_CARLO: u64 = 0x6;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes `path` into `seed`; distinct paths give independent seeds.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(seed: u64, path: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(seed, path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn paths_are_order_sensitive_and_reproducible() {
        assert_eq!(derive_seed(7, &[1, 2]), derive_seed(7, &[1, 2]));
        assert_ne!(derive_seed(7, &[1, 2]), derive_seed(7, &[2, 1]));
        assert_ne!(derive_seed(7, &[1]), derive_seed(8, &[1]));
        let a: u64 = stream(3, &[domain::TRAIN, 5]).gen();
        let b: u64 = stream(3, &[domain::TRAIN, 5]).gen();
        assert_eq!(a, b);
    }
}
