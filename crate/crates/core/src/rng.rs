//! Seeded random streams.
//!
//! All randomness goes through ChaCha8, a counter-based generator whose
//! output is identical across platforms. Independent streams are derived from
//! one 64-bit seed by selecting the ChaCha stream id, so per-slice and
//! per-batch generators never overlap.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Generator for sub-stream `stream` of `seed`.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Packs a small tag and an index into a stream id.
pub fn stream_id(tag: u32, index: u64) -> u64 {
    ((tag as u64) << 40) ^ index
}
