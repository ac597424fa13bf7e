//! Counter-based random streams.
//!
//! Every consumer of randomness draws from its own ChaCha stream derived
//! from the run seed, a purpose tag and a counter (usually the global step),
//! so results do not depend on evaluation order and a run can be resumed
//! from `(seed, step)` alone.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Init = 1,
    Sampler = 2,
    Pooling = 3,
    Synthetic = 4,
}

pub fn stream_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    debug_assert!(counter < 1 << 48);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | counter);
    rng
}
