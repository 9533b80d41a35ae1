//! Seeded random streams.
//!
//! All randomness comes from ChaCha8 keyed by the root seed. Each purpose gets
//! its own ChaCha stream id, so drawing more initialization values never shifts
//! the batch order or the generated data.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init,
    Shuffle,
    Data,
    /// Seeds for sweep cells and repeated runs.
    Derive,
}

impl Stream {
    fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Shuffle => 2,
            Stream::Data => 3,
            Stream::Derive => 4,
        }
    }
}

pub fn stream(root_seed: u64, purpose: Stream) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(root_seed);
    rng.set_stream(purpose.id());
    rng
}

/// Deterministic child seed number `index` of `root_seed`.
pub fn derive_seed(root_seed: u64, index: u64) -> u64 {
    let mut rng = stream(root_seed, Stream::Derive);
    rng.set_word_pos(u128::from(index) * 2);
    rng.next_u64()
}
