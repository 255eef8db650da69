//! Small layer primitives built directly on candle tensor ops.

use candle_core::{Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamBuilder;

/// Init standard deviation for convolution and projection weights.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        pb: &mut ParamBuilder<'_>,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let weight = pb.normal("weight", &[out_ch, in_ch, kernel, kernel], INIT_STD)?;
        let bias = pb.constant("bias", &[out_ch], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

impl Module for Conv2d {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let y = crate::conv::conv2d(xs, &self.weight, self.stride, self.padding)?;
        y.broadcast_add(&self.bias.reshape((1, self.bias.dim(0)?, 1, 1))?)
    }
}

/// Affine map over the last dimension; weight stored as `[out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(pb: &mut ParamBuilder<'_>, in_dim: usize, out_dim: usize) -> Result<Self> {
        let weight = pb.normal("weight", &[out_dim, in_dim], INIT_STD)?;
        let bias = pb.constant("bias", &[out_dim], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }
}

impl Module for Linear {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        xs.broadcast_matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    weight: Tensor,
    bias: Tensor,
    groups: usize,
    eps: f64,
}

impl GroupNorm {
    pub fn new(pb: &mut ParamBuilder<'_>, channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::Spec(format!(
                "group norm: {groups} groups do not divide {channels} channels"
            )));
        }
        let weight = pb.constant("weight", &[channels], 1.0)?;
        let bias = pb.constant("bias", &[channels], 0.0)?;
        Ok(Self {
            weight,
            bias,
            groups,
            eps: 1e-5,
        })
    }
}

impl Module for GroupNorm {
    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        let (b, c, h, w) = xs.dims4()?;
        let grouped = xs.reshape((b, self.groups, (c / self.groups) * h * w))?;
        let normed = normalize_last(&grouped, self.eps)?.reshape((b, c, h, w))?;
        normed
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)
    }
}

/// Zero-mean, unit-variance normalization over the last dimension (biased variance).
fn normalize_last(xs: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let centered = xs.broadcast_sub(&xs.mean_keepdim(D::Minus1)?)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    centered.broadcast_div(&(var + eps)?.sqrt()?)
}

/// Parameter-free instance normalization over the spatial dimensions of NCHW input.
pub fn instance_norm(xs: &Tensor, eps: f64) -> candle_core::Result<Tensor> {
    let (b, c, h, w) = xs.dims4()?;
    normalize_last(&xs.reshape((b, c, h * w))?, eps)?.reshape((b, c, h, w))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    #[default]
    Silu,
    Relu,
    LeakyRelu,
}

impl Activation {
    pub fn apply(self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Activation::Silu => xs.silu(),
            Activation::Relu => xs.relu(),
            Activation::LeakyRelu => leaky_relu(xs, 0.2),
        }
    }
}

pub fn leaky_relu(xs: &Tensor, slope: f64) -> candle_core::Result<Tensor> {
    let zeros = xs.zeros_like()?;
    xs.maximum(&zeros)? + (xs.minimum(&zeros)? * slope)?
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{seeded_rng, ParamStore};
    use candle_core::{DType, Device};

    #[test]
    fn group_norm_rejects_indivisible_channels() {
        let mut store = ParamStore::new(DType::F32);
        let mut rng = seeded_rng(0, 0);
        let mut pb = store.builder(&mut rng);
        assert!(GroupNorm::new(&mut pb, 48, 32).is_err());
        assert!(GroupNorm::new(&mut pb, 64, 32).is_ok());
    }

    #[test]
    fn instance_norm_zero_mean_unit_var() {
        let x = Tensor::arange(0f32, 32.0, &Device::Cpu)
            .unwrap()
            .reshape((1, 2, 4, 4))
            .unwrap();
        let y = instance_norm(&x, 0.0).unwrap();
        let flat = y.reshape((2, 16)).unwrap();
        let mean = flat.mean(1).unwrap().to_vec1::<f32>().unwrap();
        let var = flat.sqr().unwrap().mean(1).unwrap().to_vec1::<f32>().unwrap();
        for k in 0..2 {
            assert!(mean[k].abs() < 1e-6);
            assert!((var[k] - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn leaky_relu_slope() {
        let x = Tensor::new(&[-1f32, 0.0, 2.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![-0.2, 0.0, 2.0]);
    }
}
