//! Seeded random streams.
//!
//! A run owns one seed. Each consumer draws from its own ChaCha stream keyed
//! by the seed and a fixed stream id, so adding draws in one place never
//! shifts the numbers seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    NetInit,
    EnvInit,
    RandomActions,
    PolicyNoise,
    BufferSampling,
    Evaluation,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::NetInit => 1,
            Stream::EnvInit => 2,
            Stream::RandomActions => 3,
            Stream::PolicyNoise => 4,
            Stream::BufferSampling => 5,
            Stream::Evaluation => 6,
        }
    }
}

pub fn substream(seed: u64, stream: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.id());
    rng
}
