//! Seed derivation. Every independent random stream (a patient, a model
//! head, a split) gets its own ChaCha generator keyed by `(seed, stream)`,
//! so results never depend on iteration or thread order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// SplitMix64 finalizer over the pair.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, stream))
}

/// Stream identifiers shared across modules.
pub mod streams {
    pub const SPLIT: u64 = 0x5011;
    pub const UNET_INIT: u64 = 0x0E7;
    pub const SEG_SHUFFLE: u64 = 0x5E6;
    pub const TRUNK_INIT: u64 = 0x7201;
    pub const DETECTION_HEAD_INIT: u64 = 0xDE7;
    pub const RECOMMEND_HEAD_INIT: u64 = 0x4EC;
    pub const CLASSIFIER_INIT: u64 = 0xC1A;
    pub const PRETRAINED_STUB: u64 = 0x9E7;
    pub const TRIPLETS: u64 = 0x7219;
    pub const PATIENT_BASE: u64 = 0x1_0000;
}
