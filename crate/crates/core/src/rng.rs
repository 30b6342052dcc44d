//! Seed-derived random streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(master_seed, index)`; results never depend on
/// scheduling because each index owns its own stream.
pub fn stream_rng(master_seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(index);
    rng
}
