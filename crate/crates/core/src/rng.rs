//! Deterministic random streams.
//!
//! Every randomized operation draws from ChaCha8 (`rand_chacha::ChaCha8Rng`)
//! seeded with `seed_from_u64(seed)`. Independent consumers that share a seed
//! are separated by the ChaCha stream id, so e.g. the hyper-parameters of a
//! search candidate and its strokes never alias. ChaCha8 output is specified
//! bit-for-bit, which keeps masks reproducible across platforms.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Stream used by [`crate::maskgen::rmg`] for stroke geometry.
pub const STREAM_STROKES: u64 = 0;
/// Stream used to draw per-candidate RMG hyper-parameters.
pub const STREAM_PARAMS: u64 = 1;

pub fn stream_rng(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `k` distinct indices from `0..n` (all of them, shuffled, when `k >= n`).
pub fn sample_indices(n: usize, k: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut rng = stream_rng(seed, 0);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx.truncate(k.min(n));
    idx
}
