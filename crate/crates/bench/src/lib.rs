//! Shared fixtures for the benchmarks.

use galr_core::training::{gen_synthetic, MixtureExample, SyntheticConfig};
use galr_core::{BlockVariant, HyperParams, Tensor};

/// Toy configuration with the given block variant.
pub fn toy(variant: BlockVariant) -> HyperParams {
    HyperParams {
        variant,
        q: if variant.use_lowdim { HyperParams::toy().q } else { 0 },
        ..HyperParams::toy()
    }
}

/// One deterministic two-source mixture of `seconds` length.
pub fn mixture(seconds: f64) -> MixtureExample {
    let cfg = SyntheticConfig {
        seed: 17,
        count: 1,
        seconds,
        ..SyntheticConfig::default()
    };
    gen_synthetic(&cfg).expect("valid config").remove(0)
}

/// Deterministic dense matrix with entries in [-1, 1].
pub fn matrix(rows: usize, cols: usize) -> Tensor<f32> {
    let data = (0..rows * cols)
        .map(|i| ((i * 7919 % 1000) as f32 / 500.0) - 1.0)
        .collect();
    Tensor::new([rows, cols], data).expect("sized")
}
