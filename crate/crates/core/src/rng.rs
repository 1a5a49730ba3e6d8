//! Seeded random streams.
//!
//! Every consumer of randomness gets its own ChaCha stream derived from the run
//! seed and a fixed stream id, so adding or removing one consumer (for example
//! the test monitor) never shifts the numbers another consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

pub const SPLIT: u64 = 1;
pub const INIT: u64 = 2;
pub const DROPOUT: u64 = 3;
pub const MONITOR: u64 = 4;
pub const EVAL: u64 = 5;
pub const CLASSIFIER_REINIT: u64 = 6;
pub const SYNTHETIC: u64 = 7;
/// Batch workers use `BATCH_WORKER_BASE + worker_index`.
pub const BATCH_WORKER_BASE: u64 = 1000;

pub fn stream(seed: u64, stream_id: u64) -> StreamRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}
