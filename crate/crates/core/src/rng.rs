//! Seeded random streams.
//!
//! Every random draw in the toolkit comes from a ChaCha8 generator keyed by
//! the user seed and addressed by a stream id derived from a
//! `(purpose, a, b)` counter triple. ChaCha is a counter-mode cipher, so a
//! stream's output depends only on its key and address: generation order and
//! thread scheduling never change results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream purposes. Values are part of the reproducibility contract.
pub mod purpose {
    pub const HEAD_FC1: u64 = 1;
    pub const HEAD_CLASSIFIER: u64 = 2;
    pub const NAIVE_SAMPLER: u64 = 3;
    pub const BALANCED_SAMPLER: u64 = 4;
    pub const VAL_SPLIT: u64 = 5;
    pub const SYNTH_BASIS: u64 = 10;
    pub const SYNTH_DOMAIN: u64 = 11;
    pub const SYNTH_CAMERA: u64 = 12;
    pub const SYNTH_IDENTITY: u64 = 13;
    pub const SYNTH_SAMPLE: u64 = 14;
    pub const SYNTH_COUNTS: u64 = 15;
    pub const SYNTH_VIEW: u64 = 16;
    pub const SYNTH_MODEL: u64 = 17;
    pub const SYNTH_POST: u64 = 18;
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream addressed by `(purpose, a, b)` under `seed`.
pub fn stream(seed: u64, purpose: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(mix(mix(mix(purpose) ^ a) ^ b));
    rng
}
