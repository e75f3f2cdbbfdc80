//! Seeded random streams.
//!
//! Every stochastic component draws from its own ChaCha stream derived from
//! the scenario seed, so adding draws in one component never perturbs another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Independent purposes that consume randomness.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamId {
    TrainingSensor,
    TestSensor,
    LiveSensor,
    Drift,
    Operator,
}

impl StreamId {
    fn index(self) -> u64 {
        match self {
            StreamId::TrainingSensor => 1,
            StreamId::TestSensor => 2,
            StreamId::LiveSensor => 3,
            StreamId::Drift => 4,
            StreamId::Operator => 5,
        }
    }
}

/// A deterministic random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: StreamId) -> Self {
        Self::with_substream(seed, stream, 0)
    }

    /// Stream for a purpose repeated several times in one run (for example one
    /// stream per insertion).
    pub fn with_substream(seed: u64, stream: StreamId, sub: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream((stream.index() << 32) | (sub & 0xffff_ffff));
        RngStream { rng }
    }

    /// One draw from N(0, sigma²). A zero sigma still consumes a draw so that
    /// streams stay aligned across noise levels.
    pub fn gaussian(&mut self, sigma: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        sigma * z
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        use rand::Rng;
        self.rng.random_range(lo..hi)
    }
}
