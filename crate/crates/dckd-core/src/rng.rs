//! Seed derivation.
//!
//! Every stochastic stage (corpus, teacher init, student init, per-step batch
//! plans, degradation draws) gets its own stream derived from the master
//! seed, so reordering or parallelizing one stage never perturbs another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags for the derived seeds.
pub mod stream {
    pub const CORPUS: u64 = 1;
    pub const TEACHER_INIT: u64 = 2;
    pub const TEACHER_TRAIN: u64 = 3;
    pub const STUDENT_INIT: u64 = 4;
    pub const TRAIN_LOOP: u64 = 5;
    pub const ENCODER_INIT: u64 = 6;
    pub const CODEBOOK: u64 = 7;
}

/// SplitMix64 finalizer.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derive a child seed from `master` for the given stream/index pair.
pub fn derive(master: u64, tag: u64, index: u64) -> u64 {
    splitmix64(splitmix64(master ^ tag.wrapping_mul(0xA076_1D64_78BD_642F)) ^ index)
}

/// Deterministic generator for a derived stream.
pub fn rng(master: u64, tag: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(master, tag, index))
}
