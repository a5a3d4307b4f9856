//! Seeded, platform-independent random streams.
//!
//! Every randomized stage draws from a ChaCha8 stream keyed by the user seed
//! and a per-purpose stream id, so results do not depend on thread count or
//! on the order in which independent work items are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream ids for the different consumers of a single seed.
#[derive(Debug, Clone, Copy)]
#[repr(u64)]
pub enum Purpose {
    ItemSplit = 1,
    EntrySplit = 2,
    Negatives = 3,
    Init = 4,
    Epoch = 5,
    KMeans = 6,
    Baseline = 7,
    Synth = 8,
}

/// Stream for `purpose` with an additional sub-index (user, epoch, ...).
pub fn stream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((purpose as u64) << 56));
    rng.set_stream(index);
    rng
}
