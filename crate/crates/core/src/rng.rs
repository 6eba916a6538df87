//! Seed derivation shared by every stochastic component.
//!
//! Sub-streams are derived by mixing a stream index into the master seed with
//! the SplitMix64 finaliser, so per-sample and per-pass generators are
//! independent of evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type QaRng = ChaCha8Rng;

/// SplitMix64 finaliser.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for sub-stream `index` of `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(master ^ mix64(index.wrapping_add(0x5851_F42D_4C95_7F2D)))
}

pub fn rng_from_seed(seed: u64) -> QaRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn sub_rng(master: u64, index: u64) -> QaRng {
    rng_from_seed(derive_seed(master, index))
}
