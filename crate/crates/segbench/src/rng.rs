//! Seeding helpers: one master seed, independent substreams per work item.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RNG used everywhere; ChaCha keeps streams portable and bit-reproducible.
pub type Rng = ChaCha8Rng;

/// Root stream for a master seed.
pub fn master(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream for work item `index` (e.g. one image of a run).
///
/// Substreams never overlap regardless of how much either consumes, so
/// per-image work can be scheduled on any thread without changing results.
pub fn substream(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index.wrapping_add(1));
    rng
}
