//! Deterministic random streams.
//!
//! Every random draw in the crate comes from ChaCha8, a fully specified
//! generator whose output does not depend on platform or pointer width.
//! Independent components draw from separate ChaCha streams of the same
//! master seed; [`streams`] lists the stream ids in use.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

/// Stream ids for [`derived_rng`].
pub mod streams {
    /// Expert parameter initialization.
    pub const INIT: u64 = 1;
    /// Synthetic data drawn by the trainer and CLI.
    pub const DATA: u64 = 2;
    /// Held-out evaluation data.
    pub const EVAL: u64 = 3;
    /// Random-routing baseline simulation.
    pub const BASELINE: u64 = 4;
    /// Shuffle streams start here; worker `w` uses `SHUFFLE_BASE + w`.
    pub const SHUFFLE_BASE: u64 = 1 << 32;
}

/// Stream 0 of the given seed.
pub fn seeded_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream of the same seed, identified by `stream`.
pub fn derived_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws `n` values from a normal distribution with the given standard deviation.
pub fn normal_vec(rng: &mut Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect()
}
