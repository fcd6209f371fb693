//! Seed handling. Every stochastic step draws from a ChaCha stream whose seed
//! is derived from a base seed and a stream path, so results never depend on
//! call order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type FlareRng = ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Derives a child seed from `base` and a path of stream identifiers.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &id| splitmix64(acc ^ splitmix64(id)))
}

pub fn stream(base: u64, path: &[u64]) -> FlareRng {
    FlareRng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, kept in one place so that no two subsystems collide.
pub mod tags {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const DROPOUT: u64 = 3;
    pub const REDUCER: u64 = 4;
    pub const GMM: u64 = 5;
    pub const SPLIT: u64 = 6;
    pub const ADAPT: u64 = 7;
    pub const FOLDS: u64 = 8;
    pub const SYNTH: u64 = 9;
    pub const LANDSCAPE: u64 = 10;
    pub const SELECTION: u64 = 11;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn derived_streams_are_reproducible_and_distinct() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(0, &[]), derive_seed(1, &[]));
    }
}
