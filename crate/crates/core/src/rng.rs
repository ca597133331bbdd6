//! Deterministic random streams.
//!
//! Every stochastic component draws from a ChaCha stream whose seed is a
//! pure function of a base seed and a list of integer tags, so results do not
//! depend on evaluation order or thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a base seed with tags into a new 64-bit seed.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter()
        .fold(splitmix(base), |acc, &t| splitmix(acc ^ splitmix(t)))
}

pub fn stream(base: u64, tags: &[u64]) -> Rng {
    Rng::seed_from_u64(derive_seed(base, tags))
}

/// Stable numeric tags for named streams.
pub mod tag {
    pub const CORPUS: u64 = 1;
    pub const LABELED_SOURCE: u64 = 2;
    pub const UNLABELED_SOURCE: u64 = 3;
    pub const UNLABELED_TARGET: u64 = 4;
    pub const DEV: u64 = 5;
    pub const TEST: u64 = 6;
    pub const LM_TEXT: u64 = 7;
    pub const SPEC: u64 = 8;
    pub const INIT: u64 = 10;
    pub const HEADS: u64 = 11;
    pub const PRETRAIN: u64 = 20;
    pub const ONLINE: u64 = 30;
    pub const OFFLINE: u64 = 40;
    pub const SUPERVISED: u64 = 50;
    pub const BATCH: u64 = 60;
    pub const DROPOUT: u64 = 61;
    pub const AUGMENT: u64 = 62;
    pub const MC_DROPOUT: u64 = 63;
    pub const REPLAY: u64 = 64;
    pub const MASK: u64 = 65;
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    #[test]
    fn streams_are_reproducible_and_tag_sensitive() {
        let a: u64 = stream(7, &[1, 2]).random();
        let b: u64 = stream(7, &[1, 2]).random();
        let c: u64 = stream(7, &[2, 1]).random();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_ne!(derive_seed(7, &[]), derive_seed(8, &[]));
    }
}
