//! Seeded random streams. Every random draw in the crate goes through here so
//! that outputs are a function of (seed, stream) only.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const WORLD: u64 = 0;
    pub const TRAIN_EXAMPLES: u64 = 1;
    pub const TEST_QUERIES: u64 = 2;
    pub const ANCHOR_SPLIT: u64 = 3;
    pub const MODEL_INIT: u64 = 4;
    pub const SHUFFLE: u64 = 5;
    pub const GRAD_CHECK: u64 = 6;
    /// Per-item streams (anchors, queries) are offset from this base.
    pub const PER_ITEM: u64 = 1 << 32;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for an independent work item, e.g. one anchor or one query.
pub fn per_item(seed: u64, item: usize) -> Rng {
    seeded(seed, stream::PER_ITEM + item as u64)
}

/// Stream for an item within a sub-purpose (e.g. query `item` at shot `sub`).
pub fn per_item_sub(seed: u64, item: usize, sub: usize) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (sub as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(stream::PER_ITEM + item as u64);
    rng
}
