//! Seeded random streams. All stochastic steps take an explicit generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SenRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SenRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// An independent stream derived from `seed` and a `stream` label.
pub fn substream(seed: u64, stream: u64) -> SenRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
