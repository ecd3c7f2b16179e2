//! Seeded random streams. Every randomized unit of work (a training task,
//! a forecast, a synthetic sequence) draws from its own stream so results do
//! not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type SeededRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent stream `stream` under master `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> SeededRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Packs a purpose tag and two counters into one stream id.
pub fn stream_id(tag: u8, major: u64, minor: u64) -> u64 {
    ((tag as u64) << 56) | ((major & 0xff_ffff) << 32) | (minor & 0xffff_ffff)
}

pub const TAG_TRAIN: u8 = 1;
pub const TAG_VALID: u8 = 2;
pub const TAG_SHUFFLE: u8 = 3;
pub const TAG_SAMPLE: u8 = 4;
pub const TAG_ROUND: u8 = 5;
pub const TAG_TASK: u8 = 6;
pub const TAG_HAWKES: u8 = 7;

/// A child seed for unit `index` of kind `tag`.
pub fn derive_seed(seed: u64, tag: u8, index: u64) -> u64 {
    use rand::RngCore;
    stream_rng(seed, stream_id(tag, index >> 32, index)).next_u64()
}
