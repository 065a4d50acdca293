//! Deterministic random streams.
//!
//! Every random draw in the crate comes from ChaCha8 seeded with the user's
//! seed. Work item `index` (a bootstrap replicate, a Monte Carlo replicate)
//! reads stream `index` of that generator, so results do not depend on which
//! thread runs which item or in what order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn base_rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `index` for `seed`.
pub fn stream_rng(seed: u64, index: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}
