//! Three PatchGAN discriminators over a full / half / quarter resolution pyramid.

use candle_core::{DType, Module, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{instance_norm, leaky_relu, Conv2d};
use crate::params::{seeded_rng, ParamStore};

pub const NUM_SCALES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Conditioning {
    #[default]
    Unconditional,
    /// Concatenate the RGB input (at the same scale) to the scored image.
    RgbConcat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSpec {
    pub layers: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub base_width: usize,
    pub max_width: usize,
    pub slope: f64,
    pub conditioning: Conditioning,
    /// Channels of the scored image (the target band).
    pub image_channels: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            kernel: 4,
            stride: 2,
            padding: 1,
            base_width: 64,
            max_width: 512,
            slope: 0.2,
            conditioning: Conditioning::Unconditional,
            image_channels: 1,
        }
    }
}

impl DiscriminatorSpec {
    pub fn input_channels(&self) -> usize {
        match self.conditioning {
            Conditioning::Unconditional => self.image_channels,
            Conditioning::RgbConcat => self.image_channels + 3,
        }
    }

    pub fn widths(&self) -> Vec<usize> {
        (0..self.layers)
            .map(|i| (self.base_width << i).min(self.max_width))
            .collect()
    }

    /// Side of the patch-score map for an input of side `s`.
    pub fn patch_side(&self, s: usize) -> usize {
        (0..self.layers).fold(s, |s, _| {
            (s + 2 * self.padding).saturating_sub(self.kernel) / self.stride + 1
        })
    }

    /// Whether every convolution fits inside an input of side `s`.
    pub fn accepts(&self, s: usize) -> bool {
        let mut s = s;
        for _ in 0..self.layers {
            if s + 2 * self.padding < self.kernel {
                return false;
            }
            s = (s + 2 * self.padding - self.kernel) / self.stride + 1;
        }
        s >= 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.kernel == 0 || self.stride == 0 || self.base_width == 0 {
            return Err(Error::Spec("discriminator dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Output of one discriminator: the patch logits and every tapped activation.
#[derive(Debug, Clone)]
pub struct Scored {
    /// `B x 1 x h x w` patch logits.
    pub scores: Tensor,
    /// Activations of each conv layer followed by the score map itself.
    pub features: Vec<Tensor>,
}

#[derive(Debug)]
pub struct PatchDiscriminator {
    params: ParamStore,
    convs: Vec<Conv2d>,
    head: Conv2d,
    slope: f64,
}

impl PatchDiscriminator {
    fn new(spec: &DiscriminatorSpec, seed: u64, stream: u64, dtype: DType) -> Result<Self> {
        let mut params = ParamStore::new(dtype);
        let mut rng = seeded_rng(seed, stream);
        let mut pb = params.builder(&mut rng);
        let mut convs = Vec::new();
        let mut cin = spec.input_channels();
        for (i, w) in spec.widths().into_iter().enumerate() {
            convs.push(Conv2d::new(
                &mut pb.scope(format!("conv{i}")),
                cin,
                w,
                spec.kernel,
                spec.stride,
                spec.padding,
            )?);
            cin = w;
        }
        let head = Conv2d::new(&mut pb.scope("head"), cin, 1, 3, 1, 1)?;
        drop(pb);
        Ok(Self {
            params,
            convs,
            head,
            slope: spec.slope,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn forward(&self, xs: &Tensor) -> Result<Scored> {
        let mut x = xs.clone();
        let mut features = Vec::with_capacity(self.convs.len() + 1);
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward(&x)?;
            if i > 0 {
                x = instance_norm(&x, 1e-5)?;
            }
            x = leaky_relu(&x, self.slope)?;
            features.push(x.clone());
        }
        let scores = self.head.forward(&x)?;
        features.push(scores.clone());
        Ok(Scored { scores, features })
    }
}

/// Average-pooled pyramid `[full, half, quarter]`.
pub fn multiscale_pyramid(xs: &Tensor) -> Result<Vec<Tensor>> {
    let (_, _, h, w) = xs.dims4()?;
    if h % 4 != 0 || w % 4 != 0 {
        return Err(Error::Shape(format!("{h}x{w} is not divisible by 4")));
    }
    let half = xs.avg_pool2d(2)?;
    let quarter = half.avg_pool2d(2)?;
    Ok(vec![xs.clone(), half, quarter])
}

#[derive(Debug)]
pub struct MultiScaleDiscriminator {
    spec: DiscriminatorSpec,
    image_size: (usize, usize),
    nets: Vec<PatchDiscriminator>,
}

/// First RNG stream used for discriminator initialization; scale `k` uses `stream + k`.
pub const DISCRIMINATOR_STREAM: u64 = 10;

impl MultiScaleDiscriminator {
    /// `image_size` is the full-resolution `(height, width)` that scale 0 receives.
    pub fn new(
        spec: &DiscriminatorSpec,
        image_size: (usize, usize),
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        spec.validate()?;
        let coarsest = image_size.0.min(image_size.1) >> (NUM_SCALES - 1);
        if !spec.accepts(coarsest) {
            return Err(Error::Spec(format!(
                "a {}x{} input is too small for {} discriminator layers at the coarsest scale",
                image_size.0, image_size.1, spec.layers
            )));
        }
        let nets = (0..NUM_SCALES)
            .map(|k| PatchDiscriminator::new(spec, seed, DISCRIMINATOR_STREAM + k as u64, dtype))
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            image_size,
            nets,
        })
    }

    pub fn spec(&self) -> &DiscriminatorSpec {
        &self.spec
    }

    pub fn nets(&self) -> &[PatchDiscriminator] {
        &self.nets
    }

    pub fn expected_size(&self, scale: usize) -> (usize, usize) {
        (self.image_size.0 >> scale, self.image_size.1 >> scale)
    }

    /// Scores `image` with discriminator `scale` (0-based). The image must already be pooled to
    /// that scale; `condition` is the RGB input at the same scale when conditioning is enabled.
    pub fn score(&self, scale: usize, image: &Tensor, condition: Option<&Tensor>) -> Result<Scored> {
        let net = self
            .nets
            .get(scale)
            .ok_or_else(|| Error::Spec(format!("no discriminator for scale {scale}")))?;
        let (_, c, h, w) = image.dims4()?;
        if (h, w) != self.expected_size(scale) {
            return Err(Error::Shape(format!(
                "scale {scale} expects {:?}, got {h}x{w}",
                self.expected_size(scale)
            )));
        }
        if c != self.spec.image_channels {
            return Err(Error::Shape(format!(
                "discriminator expects {} image channels, got {c}",
                self.spec.image_channels
            )));
        }
        let input = match (self.spec.conditioning, condition) {
            (Conditioning::Unconditional, None) => image.clone(),
            (Conditioning::Unconditional, Some(_)) => {
                return Err(Error::Spec(
                    "condition supplied to an unconditional discriminator".into(),
                ))
            }
            (Conditioning::RgbConcat, Some(rgb)) => {
                if rgb.dims4()? != (image.dim(0)?, 3, h, w) {
                    return Err(Error::Shape("condition does not match the image".into()));
                }
                Tensor::cat(&[image, &rgb.to_dtype(image.dtype())?], 1)?
            }
            (Conditioning::RgbConcat, None) => {
                return Err(Error::Spec("rgb-concat discriminator needs a condition".into()))
            }
        };
        net.forward(&input)
    }
}
