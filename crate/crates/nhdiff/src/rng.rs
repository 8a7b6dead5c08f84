//! Seeded Gaussian streams.
//!
//! Every path owns a ChaCha8 stream selected by its id, so a path's draws do
//! not depend on which thread simulates it or in which order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub struct NormalStream(ChaCha8Rng);

impl NormalStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        NormalStream(rng)
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    /// Fills `out` with independent `N(0, scale^2)` draws.
    pub fn fill(&mut self, out: &mut [f64], scale: f64) {
        for x in out {
            *x = scale * self.normal();
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.gen::<f64>()
    }
}

/// Seed of an independent sub-experiment `tag` under `master`.
pub fn derive_seed(master: u64, tag: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    rng.set_stream(tag);
    rng.next_u64()
}
