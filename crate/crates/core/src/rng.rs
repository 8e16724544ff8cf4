//! Reproducible per-path random streams and a parallel batch runner.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;

/// A master seed and a path index. Each index owns two ChaCha streams: one
/// for the driving noise and one for auxiliary draws (θ, Γ, resampling
/// coins), so changing how many auxiliary draws a path makes never shifts its
/// Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RandomSource {
    pub seed: u64,
    pub index: u64,
}

impl RandomSource {
    pub fn new(seed: u64, index: u64) -> Self {
        RandomSource { seed, index }
    }

    fn stream(&self, k: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(k);
        rng
    }

    pub fn noise(&self) -> ChaCha8Rng {
        self.stream(2 * self.index)
    }

    pub fn aux(&self) -> ChaCha8Rng {
        self.stream(2 * self.index + 1)
    }

    /// Source for an independent batch derived from this seed.
    pub fn child_seed(seed: u64, label: u64) -> u64 {
        // SplitMix64 finalizer.
        let mut z = seed ^ label.wrapping_mul(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

/// Runs `f` on path indices `0..n` in parallel; output order is by index.
pub fn par_map<T, F>(seed: u64, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(RandomSource) -> Result<T> + Sync + Send,
{
    (0..n as u64)
        .into_par_iter()
        .map(|i| f(RandomSource::new(seed, i)))
        .collect()
}
