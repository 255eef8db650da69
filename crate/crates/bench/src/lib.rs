//! Shared fixtures for the benchmarks.

use candle_core::{DType, Device, Tensor};
use pix2next::config::RunConfig;

/// Uniform `[0, 1)` tensor of the given shape.
pub fn uniform(shape: &[usize]) -> Tensor {
    Tensor::rand(0f32, 1.0, shape, &Device::Cpu)
        .and_then(|t| t.to_dtype(DType::F32))
        .expect("cpu tensor")
}

/// The reduced 64x64 configuration used for toy runs.
pub fn toy_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.data.resize = [64, 64];
    c.generator.widths = [16, 32, 32];
    c.generator.norm_groups = 8;
    c.discriminator.base_width = 8;
    c.train.batch_size = 4;
    c.train.iterations = 1_000_000;
    c
}
