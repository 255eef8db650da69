//! Frozen global-feature providers for the generator's cross-attention sites.

use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::backbone::{resolve_weights, ConvPyramid};
use crate::error::{Error, Result};
use crate::params::seeded_rng;

/// Input side length accepted by the external backbones.
pub const BACKBONE_INPUT: usize = 256;
/// Side of the identity stub's token grid.
pub const STUB_GRID: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Backbone {
    Internimage,
    Vit,
    Swinv2,
    Resnet,
    #[default]
    IdentityStub,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Internimage => "internimage",
            Backbone::Vit => "vit",
            Backbone::Swinv2 => "swinv2",
            Backbone::Resnet => "resnet",
            Backbone::IdentityStub => "identity-stub",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractorSpec {
    /// `false` runs the generator without feature injection.
    pub enabled: bool,
    pub backbone: Backbone,
    /// Weights file path or registry key; empty means the backbone's own name.
    pub weights: String,
    pub frozen: bool,
    /// Channel width of the identity stub's tokens.
    pub token_dim: usize,
    /// Seed of the identity stub's projection.
    pub seed: u64,
}

impl Default for ExtractorSpec {
    fn default() -> Self {
        Self {
            enabled: true,
            backbone: Backbone::IdentityStub,
            weights: String::new(),
            frozen: true,
            token_dim: 64,
            seed: 0,
        }
    }
}

/// One image's global representation: `m x d_f` tokens over an `h_f x w_f` grid, row-major.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub backbone: String,
}

impl FeatureMap {
    pub fn new(tokens: Tensor, grid: (usize, usize), backbone: impl Into<String>) -> Result<Self> {
        let (m, d) = tokens.dims2()?;
        if m == 0 || d == 0 || m != grid.0 * grid.1 {
            return Err(Error::Shape(format!(
                "feature map with {m} tokens does not fit grid {grid:?}"
            )));
        }
        Ok(Self {
            tokens,
            grid,
            backbone: backbone.into(),
        })
    }

    /// `d_f x h_f x w_f` view of the tokens.
    pub fn to_grid(&self) -> Result<Tensor> {
        let d = self.tokens.dim(1)?;
        Ok(self
            .tokens
            .t()?
            .reshape((d, self.grid.0, self.grid.1))?)
    }

    pub fn from_grid(grid: &Tensor, backbone: impl Into<String>) -> Result<Self> {
        let (d, h, w) = grid.dims3()?;
        let tokens = grid.reshape((d, h * w))?.t()?.contiguous()?;
        Self::new(tokens, (h, w), backbone)
    }
}

/// Features for a whole batch: `B x m x d_f`.
#[derive(Debug, Clone)]
pub struct FeatureBatch {
    pub tokens: Tensor,
    pub grid: (usize, usize),
    pub backbone: String,
}

impl FeatureBatch {
    pub fn len(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.dims()[2]
    }

    pub fn get(&self, i: usize) -> Result<FeatureMap> {
        FeatureMap::new(self.tokens.get(i)?, self.grid, self.backbone.clone())
    }

    pub fn from_maps(maps: &[FeatureMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::Shape("empty feature batch".into()))?;
        let tokens: Vec<Tensor> = maps.iter().map(|m| m.tokens.unsqueeze(0)).collect::<candle_core::Result<_>>()?;
        Ok(Self {
            tokens: Tensor::cat(&tokens, 0)?,
            grid: first.grid,
            backbone: first.backbone.clone(),
        })
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            tokens: self.tokens.to_dtype(dtype)?,
            grid: self.grid,
            backbone: self.backbone.clone(),
        })
    }
}

/// A frozen network mapping an RGB batch to global tokens.
pub trait FeatureBackbone: Send + Sync {
    fn id(&self) -> &str;
    fn token_dim(&self) -> usize;
    /// `rgb` is `B x 3 x H x W` in `[0, 1]`.
    fn forward(&self, rgb: &Tensor) -> Result<FeatureBatch>;
}

/// Cell-mean pooling to an 8x8 grid followed by a fixed seeded projection `3 -> d_f`.
#[derive(Debug, Clone)]
pub struct IdentityStub {
    weight: Tensor,
    bias: Tensor,
}

impl IdentityStub {
    pub fn new(token_dim: usize, seed: u64) -> Result<Self> {
        if token_dim == 0 {
            return Err(Error::Spec("token_dim must be positive".into()));
        }
        let mut rng = seeded_rng(seed, 0x5EED_0001);
        let dist = Normal::new(0.0f32, 1.0).unwrap();
        let w: Vec<f32> = (0..3 * token_dim).map(|_| dist.sample(&mut rng)).collect();
        let b: Vec<f32> = (0..token_dim).map(|_| dist.sample(&mut rng) * 0.1).collect();
        Ok(Self {
            weight: Tensor::from_vec(w, (3, token_dim), &Device::Cpu)?,
            bias: Tensor::from_vec(b, token_dim, &Device::Cpu)?,
        })
    }

    pub fn projection(&self) -> (&Tensor, &Tensor) {
        (&self.weight, &self.bias)
    }
}

impl FeatureBackbone for IdentityStub {
    fn id(&self) -> &str {
        Backbone::IdentityStub.name()
    }

    fn token_dim(&self) -> usize {
        self.bias.dims()[0]
    }

    fn forward(&self, rgb: &Tensor) -> Result<FeatureBatch> {
        let (b, _, h, w) = rgb.dims4()?;
        if h % STUB_GRID != 0 || w % STUB_GRID != 0 {
            return Err(Error::Shape(format!(
                "identity stub needs sides divisible by {STUB_GRID}, got {h}x{w}"
            )));
        }
        let dtype = rgb.dtype();
        let pooled = rgb
            .detach()
            .to_dtype(DType::F32)?
            .avg_pool2d((h / STUB_GRID, w / STUB_GRID))?;
        let m = STUB_GRID * STUB_GRID;
        let cells = pooled.reshape((b, 3, m))?.transpose(1, 2)?.contiguous()?;
        let tokens = cells
            .broadcast_matmul(&self.weight)?
            .broadcast_add(&self.bias)?
            .to_dtype(dtype)?;
        Ok(FeatureBatch {
            tokens,
            grid: (STUB_GRID, STUB_GRID),
            backbone: self.id().to_string(),
        })
    }
}

/// An external backbone shipped as a frozen convolutional stack; the last stage is the tap.
pub struct ConvStackBackbone {
    id: String,
    net: ConvPyramid,
}

impl ConvStackBackbone {
    pub fn load(backbone: Backbone, weights: &str) -> Result<Self> {
        let path = resolve_weights(weights, backbone.name());
        Ok(Self {
            id: backbone.name().to_string(),
            net: ConvPyramid::load(&path, backbone.name())?,
        })
    }
}

impl FeatureBackbone for ConvStackBackbone {
    fn id(&self) -> &str {
        &self.id
    }

    fn token_dim(&self) -> usize {
        self.net.out_channels()
    }

    fn forward(&self, rgb: &Tensor) -> Result<FeatureBatch> {
        let (b, _, h, w) = rgb.dims4()?;
        if (h, w) != (BACKBONE_INPUT, BACKBONE_INPUT) {
            return Err(Error::Shape(format!(
                "{} expects {BACKBONE_INPUT}x{BACKBONE_INPUT} input, got {h}x{w}",
                self.id
            )));
        }
        let last = self.net.forward_all(rgb)?.pop().expect("non-empty stack");
        let (_, d, gh, gw) = last.dims4()?;
        let tokens = last
            .reshape((b, d, gh * gw))?
            .transpose(1, 2)?
            .contiguous()?
            .to_dtype(rgb.dtype())?;
        Ok(FeatureBatch {
            tokens,
            grid: (gh, gw),
            backbone: self.id.clone(),
        })
    }
}

/// Counts calls so training can prove features are extracted once per step.
pub struct Extractor {
    backbone: Option<Box<dyn FeatureBackbone>>,
    calls: AtomicUsize,
}

impl fmt::Debug for Extractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Extractor")
            .field("backbone", &self.backbone.as_ref().map(|b| b.id().to_string()))
            .field("calls", &self.calls())
            .finish()
    }
}

impl Extractor {
    pub fn from_spec(spec: &ExtractorSpec) -> Result<Self> {
        if !spec.enabled {
            return Ok(Self::disable());
        }
        if !spec.frozen {
            return Err(Error::Spec("extractor finetuning is not supported".into()));
        }
        let backbone: Box<dyn FeatureBackbone> = match spec.backbone {
            Backbone::IdentityStub => Box::new(IdentityStub::new(spec.token_dim, spec.seed)?),
            other => Box::new(ConvStackBackbone::load(other, &spec.weights)?),
        };
        Ok(Self::with_backbone(backbone))
    }

    pub fn with_backbone(backbone: Box<dyn FeatureBackbone>) -> Self {
        Self {
            backbone: Some(backbone),
            calls: AtomicUsize::new(0),
        }
    }

    /// The "no extractor" ablation: attention sites pass their input through unchanged.
    pub fn disable() -> Self {
        Self {
            backbone: None,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.backbone.is_some()
    }

    pub fn token_dim(&self) -> Option<usize> {
        self.backbone.as_ref().map(|b| b.token_dim())
    }

    pub fn id(&self) -> &str {
        self.backbone.as_ref().map_or("none", |b| b.id())
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    /// Features for `rgb` (`B x 3 x H x W`), or `None` when disabled.
    pub fn extract(&self, rgb: &Tensor) -> Result<Option<FeatureBatch>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        let Some(backbone) = &self.backbone else {
            return Ok(None);
        };
        let (_, c, _, _) = rgb.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("extractor expects 3 channels, got {c}")));
        }
        let features = backbone.forward(rgb)?;
        let flat = features.tokens.flatten_all()?.to_dtype(DType::F64)?;
        if !flat.to_vec1::<f64>()?.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite(format!("{} features", backbone.id())));
        }
        Ok(Some(features))
    }
}
