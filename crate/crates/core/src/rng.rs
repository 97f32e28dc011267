//! Seeded random streams.
//!
//! Every stochastic operation takes an explicit 64-bit seed. Streams are
//! ChaCha8 (a counter-based generator): the seed selects the key and the
//! stream id selects an independent keystream, so per-trial or per-particle
//! generators can be derived without coordination.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type LabRng = ChaCha8Rng;

/// Generator for `(seed, stream)`.
pub fn stream(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}
