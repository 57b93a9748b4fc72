//! Deterministic derivation of independent random streams from one seed.
//!
//! Every consumer asks for a numbered stream of a ChaCha8 generator keyed by
//! the run seed. Stream numbers are fixed per purpose (see the `STREAM_*`
//! constants), so adding draws to one purpose never shifts another.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STREAM_GEOMETRY: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_FRAGMENTS: u64 = 3;
pub const STREAM_SLICING: u64 = 4;
pub const STREAM_SHUFFLE: u64 = 5;
pub const STREAM_AUGMENT: u64 = 6;
pub const STREAM_SAMPLING: u64 = 7;
pub const STREAM_INIT: u64 = 8;
pub const STREAM_SUBSEEDS: u64 = 9;

pub fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// The `index`-th child seed of `seed`, e.g. one per phantom of a batch.
pub fn sub_seed(seed: u64, index: u64) -> u64 {
    let mut rng = stream(seed, STREAM_SUBSEEDS);
    rng.set_word_pos(2 * index as u128);
    rng.next_u64()
}
