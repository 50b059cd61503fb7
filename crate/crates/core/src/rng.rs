//! Deterministic per-UE random streams.
//!
//! Every UE owns independent ChaCha8 streams for arrivals, block errors and
//! channel state, so the draws one UE consumes never shift another UE's
//! sequence. Same seed, same streams, on every platform.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::model::UeId;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Traffic = 0,
    Harq = 1,
    Channel = 2,
}

pub fn stream(seed: u64, ue: UeId, kind: StreamKind) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((ue as u64) << 2) | kind as u64);
    rng
}
