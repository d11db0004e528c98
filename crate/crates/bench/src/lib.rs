//! Shared fixtures for the criterion benches.

use vitlr_core::rng::SplitMix64;
use vitlr_core::{ModelConfig, Tensor, ViTLR};

pub fn random(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, 1.0, &mut SplitMix64::new(seed))
}

/// The tiny configuration with `n` input frames, randomly initialised.
pub fn tiny_model(n: usize) -> ViTLR {
    ViTLR::new(
        ModelConfig {
            n,
            ..ModelConfig::tiny()
        },
        0,
    )
    .expect("tiny config is valid")
}

/// `n` random single-clip frames matching `cfg`.
pub fn frames(cfg: &ModelConfig, seed: u64) -> Vec<Tensor> {
    (0..cfg.n)
        .map(|k| random(&[1, cfg.c, cfg.h, cfg.w], seed + k as u64))
        .collect()
}
