//! Seedable, splittable random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by a
//! 64-bit seed and a stream id. ChaCha is counter based, so independent
//! streams are obtained by selecting a different stream id rather than by
//! drawing seeds from a parent generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream ids for the different consumers of a seed.
pub mod streams {
    pub const FORWARD_MASK: u64 = 1;
    pub const REVERSE_STEP: u64 = 2;
    pub const TIE_BREAK: u64 = 3;
    pub const INDEX_FILTER: u64 = 4;
    pub const LEXICON: u64 = 5;
    pub const SAMPLES: u64 = 6;
    pub const KMEANS: u64 = 7;
    pub const INIT: u64 = 8;
    pub const SHUFFLE: u64 = 9;
    pub const NOISE_LEVEL: u64 = 10;
}

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Derive a child seed from a parent seed and a label (splitmix64 finalizer).
pub fn derive(seed: u64, label: u64) -> u64 {
    let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a seed from a path of labels.
pub fn derive_path(seed: u64, labels: &[u64]) -> u64 {
    labels.iter().fold(seed, |s, &l| derive(s, l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 1), |r, _| Some(r.random())).collect();
        let b: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 1), |r, _| Some(r.random())).collect();
        let c: Vec<u64> = (0..4).map(|_| 0).scan(stream(7, 2), |r, _| Some(r.random())).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn derive_separates_labels() {
        assert_ne!(derive(1, 0), derive(1, 1));
        assert_ne!(derive(0, 1), derive(1, 0));
        assert_eq!(derive_path(3, &[1, 2]), derive(derive(3, 1), 2));
    }
}
