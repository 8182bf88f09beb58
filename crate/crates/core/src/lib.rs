//! Masked event modeling at desk scale.
//!
//! The pipeline runs in three stages over dense event histograms:
//! a discrete VAE learns a codebook of patch tokens ([`dvae`]), a vision
//! transformer is pretrained to predict the tokens of masked patches
//! ([`vit`]), and the pretrained backbone is evaluated by finetuning, linear
//! probing and a toy segmentation head ([`downstream`]). Training data comes
//! from the synthetic event generator in [`synth`].

pub mod augment;
pub mod data;
pub mod downstream;
pub mod dvae;
pub mod event_io;
pub mod histogram;
pub mod synth;
pub mod tensor;
pub mod vit;

use rand::SeedableRng;

/// Deterministic random source used throughout the crate.
pub type Rng = rand_chacha::ChaCha8Rng;

pub fn rng_from_seed(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Mixes `(seed, stream, index)` into an independent seed (splitmix64).
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random source for training step `step`. Deriving it from the step index
/// rather than threading one generator through the loop makes a resumed run
/// identical to an uninterrupted one.
pub fn step_rng(seed: u64, step: u64) -> Rng {
    rng_from_seed(derive_seed(seed, 1, step))
}
