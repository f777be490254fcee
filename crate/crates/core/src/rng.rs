//! Reproducible random streams.
//!
//! Every solver run owns one ChaCha8 generator per purpose. All generators of
//! a run share the run seed and differ only in their stream id, so the noise,
//! direction and stepsize draws never interfere with each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use rand_chacha::ChaCha8Rng as RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StreamPurpose {
    /// Sample noise ξ added by the oracles.
    SampleNoise,
    /// Perturbation directions Δ.
    Direction,
    /// Second perturbation directions Δ̃ used by the Hessian estimator.
    SecondDirection,
    /// Draws for the uniform-random stepsize mode.
    Stepsize,
}

impl StreamPurpose {
    fn id(self) -> u64 {
        match self {
            StreamPurpose::SampleNoise => 0,
            StreamPurpose::Direction => 1,
            StreamPurpose::SecondDirection => 2,
            StreamPurpose::Stepsize => 3,
        }
    }
}

/// Build the generator for `(seed, purpose)`.
pub fn stream(seed: u64, purpose: StreamPurpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose.id());
    rng
}

/// The full set of streams used by one run.
#[derive(Clone, Debug)]
pub struct RunStreams {
    pub noise: ChaCha8Rng,
    pub direction: ChaCha8Rng,
    pub second_direction: ChaCha8Rng,
    pub stepsize: ChaCha8Rng,
}

impl RunStreams {
    pub fn new(seed: u64) -> Self {
        Self {
            noise: stream(seed, StreamPurpose::SampleNoise),
            direction: stream(seed, StreamPurpose::Direction),
            second_direction: stream(seed, StreamPurpose::SecondDirection),
            stepsize: stream(seed, StreamPurpose::Stepsize),
        }
    }
}
