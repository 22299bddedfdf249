//! Seed derivation. Every random stream in the crate is a `ChaCha8Rng` keyed
//! by `(seed, stream tag, index)`, so draws never depend on call order across
//! subsystems or on thread scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_USER_INIT: u64 = 1;
pub const STREAM_TRIPLES: u64 = 2;
pub const STREAM_CODEBOOK_INIT: u64 = 3;
pub const STREAM_DEAD_CODES: u64 = 4;
pub const STREAM_EVAL: u64 = 5;
pub const STREAM_PROBE: u64 = 6;
pub const STREAM_GENERATOR: u64 = 7;
pub const STREAM_STAGE2_SAMPLES: u64 = 8;
pub const STREAM_STAGE2_NOISE: u64 = 9;
pub const STREAM_SYNTH: u64 = 10;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ stream) ^ index)
}

pub fn stream(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, stream, index))
}
