//! Seeding discipline.
//!
//! Every random choice in the crate draws from a ChaCha8 generator keyed by
//! a user-visible `u64` seed plus a fixed stream id, so independent stages
//! (centers, noise, allocation, model init, per-epoch shuffles) never share
//! or steal randomness from each other. Identical seeds therefore reproduce
//! identical datasets, parameters and logs on every platform.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the independent random stages of a run.
pub mod stream {
    pub const CENTERS: u64 = 1;
    pub const NOISE: u64 = 2;
    pub const TRANSFORM: u64 = 3;
    pub const ALLOC: u64 = 4;
    pub const DOMAIN_SHIFT: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const MODEL_INIT: u64 = 7;
    pub const CLASSIFIER_INIT: u64 = 8;
    pub const SUBSAMPLE: u64 = 9;
    /// Per-epoch shuffles use `SHUFFLE_BASE + epoch`.
    pub const SHUFFLE_BASE: u64 = 1_000;
    /// Per-epoch prototype regeneration subsampling uses `REGEN_BASE + epoch`.
    pub const REGEN_BASE: u64 = 1_000_000;
}

/// Returns a generator for `(seed, stream)`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream_reproduces() {
        let mut r1 = seeded(7, stream::NOISE);
        let mut r2 = seeded(7, stream::NOISE);
        let a: Vec<f64> = (0..8).map(|_| r1.random()).collect();
        let b: Vec<f64> = (0..8).map(|_| r2.random()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let a: f64 = seeded(7, stream::CENTERS).random();
        let b: f64 = seeded(7, stream::NOISE).random();
        assert_ne!(a, b);
    }
}
