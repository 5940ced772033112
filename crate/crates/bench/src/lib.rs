//! Shared fixtures for the benchmarks.

use hgf_core::quant::quantize_weights;
use hgf_core::{DenseTensor, PackingMode, TernaryWeight};

pub fn activations(tokens: usize, width: usize, seed: u64) -> DenseTensor {
    DenseTensor::uniform(&[tokens, width], -1.0, 1.0, seed)
}

pub fn latent_weight(out_features: usize, in_features: usize, seed: u64) -> DenseTensor {
    let bound = 1.0 / (in_features as f32).sqrt();
    DenseTensor::uniform(&[out_features, in_features], -bound, bound, seed)
}

pub fn ternary_weight(out_features: usize, in_features: usize, packing: PackingMode, seed: u64) -> TernaryWeight {
    quantize_weights(&latent_weight(out_features, in_features, seed), packing).expect("2-D weight")
}

/// `n` trits cycling through -1, 0, +1 with a seeded offset.
pub fn trits(n: usize, seed: u64) -> Vec<i8> {
    (0..n).map(|i| ((i as u64 * 7 + seed) % 3) as i8 - 1).collect()
}
