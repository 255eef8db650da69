//! Encoder / bottleneck / decoder translation network with cross-attention feature injection.
//!
//! Block schedule (widths `w0, w1, w2`, defaults 128, 256, 512):
//!
//! ```text
//! encoder     B1 res[w0,w0] res[w0,w1] res[w1,w1]   B2 down[w1]
//!             B3 res[w1,w1] res[w1,w2] res[w2,w2]   B4 down[w2]
//!             B5 res[w2,w2] x3                      B6 down[w2]
//!             B7 res[w2,w2] attn
//! bottleneck  B1 res x3   B2 res attn res   B3 res x3
//! decoder     B1 res attn res                       B2 up[w2]
//!             B3 res[w2,w2] res[w2,w1] res[w1,w1]   B4 up[w1]
//!             B5 res[w1,w1] x3                      B6 up[w1]
//!             B7 res[w1,w0] res[w0,w0]
//! ```
//!
//! A 3x3 stem maps the RGB input to `w0` channels and a 3x3 head maps `w0` to the output band,
//! squashed into `[0, 1]` with a sigmoid. Encoder activations are added to the decoder right
//! after each upsample, at equal resolution and width.

use candle_core::{DType, Module, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractor::FeatureBatch;
use crate::nn::{Activation, Conv2d, GroupNorm, Linear};
use crate::params::{seeded_rng, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum AttentionPlacement {
    /// Bottleneck only.
    #[serde(rename = "B-only")]
    BottleneckOnly,
    /// Encoder B7, bottleneck B2 and decoder B1.
    #[default]
    #[serde(rename = "EBD")]
    EncoderBottleneckDecoder,
}

impl AttentionPlacement {
    pub fn label(self) -> &'static str {
        match self {
            AttentionPlacement::BottleneckOnly => "B-only",
            AttentionPlacement::EncoderBottleneckDecoder => "EBD",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum SkipPolicy {
    #[default]
    Additive,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSpec {
    pub widths: [usize; 3],
    #[serde(skip)]
    pub attention: AttentionPlacement,
    pub attn_hidden: usize,
    pub attn_heads: usize,
    pub norm_groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub activation: Activation,
    pub skip: SkipPolicy,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self::paper_default()
    }
}

impl GeneratorSpec {
    pub fn paper_default() -> Self {
        Self {
            widths: [128, 256, 512],
            attention: AttentionPlacement::EncoderBottleneckDecoder,
            attn_hidden: 128,
            attn_heads: 4,
            norm_groups: 32,
            in_channels: 3,
            out_channels: 1,
            activation: Activation::Silu,
            skip: SkipPolicy::Additive,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for &w in &self.widths {
            if w == 0 || self.norm_groups == 0 || w % self.norm_groups != 0 {
                return Err(Error::Spec(format!(
                    "width {w} is not divisible by {} norm groups",
                    self.norm_groups
                )));
            }
        }
        if self.attn_heads == 0 || self.attn_hidden % self.attn_heads != 0 {
            return Err(Error::Spec(format!(
                "attention hidden dim {} is not divisible by {} heads",
                self.attn_hidden, self.attn_heads
            )));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Spec("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// The block schedule as data.
    pub fn plan(&self) -> Vec<StagePlan> {
        let [w0, w1, w2] = self.widths;
        let ebd = self.attention == AttentionPlacement::EncoderBottleneckDecoder;
        let res = |a, b| LayerPlan::Res { cin: a, cout: b };
        let attn = LayerPlan::Attn {
            hidden: self.attn_hidden,
            heads: self.attn_heads,
        };
        let mut stages = Vec::new();
        let mut push = |section, index, layers: Vec<LayerPlan>| {
            stages.push(StagePlan {
                section,
                index,
                layers,
            })
        };
        use Section::*;
        push(Encoder, 1, vec![res(w0, w0), res(w0, w1), res(w1, w1)]);
        push(Encoder, 2, vec![LayerPlan::Down(w1)]);
        push(Encoder, 3, vec![res(w1, w1), res(w1, w2), res(w2, w2)]);
        push(Encoder, 4, vec![LayerPlan::Down(w2)]);
        push(Encoder, 5, vec![res(w2, w2); 3]);
        push(Encoder, 6, vec![LayerPlan::Down(w2)]);
        let mut b7 = vec![res(w2, w2)];
        if ebd {
            b7.push(attn);
        }
        push(Encoder, 7, b7);
        push(Bottleneck, 1, vec![res(w2, w2); 3]);
        push(Bottleneck, 2, vec![res(w2, w2), attn, res(w2, w2)]);
        push(Bottleneck, 3, vec![res(w2, w2); 3]);
        let mut d1 = vec![res(w2, w2)];
        if ebd {
            d1.push(attn);
        }
        d1.push(res(w2, w2));
        push(Decoder, 1, d1);
        push(Decoder, 2, vec![LayerPlan::Up(w2)]);
        push(Decoder, 3, vec![res(w2, w2), res(w2, w1), res(w1, w1)]);
        push(Decoder, 4, vec![LayerPlan::Up(w1)]);
        push(Decoder, 5, vec![res(w1, w1); 3]);
        push(Decoder, 6, vec![LayerPlan::Up(w1)]);
        push(Decoder, 7, vec![res(w1, w0), res(w0, w0)]);
        stages
    }

    /// Parameter count implied by the plan for a given extractor token width.
    pub fn parameter_count(&self, token_dim: Option<usize>) -> usize {
        let groups_params = |c: usize| 2 * c;
        let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k + cout;
        let lin = |i: usize, o: usize| i * o + o;
        let mut total = conv(self.in_channels, self.widths[0], 3);
        for stage in self.plan() {
            for layer in stage.layers {
                total += match layer {
                    LayerPlan::Res { cin, cout } => {
                        groups_params(cin)
                            + conv(cin, cout, 3)
                            + groups_params(cout)
                            + conv(cout, cout, 3)
                            + if cin != cout { conv(cin, cout, 1) } else { 0 }
                    }
                    LayerPlan::Down(c) | LayerPlan::Up(c) => conv(c, c, 3),
                    LayerPlan::Attn { hidden, .. } => match token_dim {
                        Some(d) => {
                            let c = self.widths[2];
                            lin(c, hidden) + 2 * lin(d, hidden) + lin(hidden, c)
                        }
                        None => 0,
                    },
                };
            }
        }
        total + groups_params(self.widths[0]) + conv(self.widths[0], self.out_channels, 3)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Section {
    Encoder,
    Bottleneck,
    Decoder,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Encoder => "encoder",
            Section::Bottleneck => "bottleneck",
            Section::Decoder => "decoder",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerPlan {
    Res { cin: usize, cout: usize },
    Attn { hidden: usize, heads: usize },
    Down(usize),
    Up(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub section: Section,
    /// 1-based block index within the section.
    pub index: usize,
    pub layers: Vec<LayerPlan>,
}

impl StagePlan {
    pub fn name(&self) -> String {
        format!("{}.b{}", self.section.name(), self.index)
    }
}

/// Decoder block after which an encoder activation is added, paired with its source block.
const SKIPS: [(usize, usize); 3] = [(2, 5), (4, 2), (6, 1)];

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
    act: Activation,
}

impl ResBlock {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&self.act.apply(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&self.act.apply(&self.norm2.forward(&h)?)?)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((skip + h)?)
    }
}

/// Multi-head cross-attention from a feature grid (queries) to extractor tokens (keys, values),
/// added back onto the grid.
#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub(crate) q: Linear,
    pub(crate) k: Linear,
    pub(crate) v: Linear,
    pub(crate) out: Linear,
    heads: usize,
    hidden: usize,
}

impl CrossAttention {
    pub fn new(
        pb: &mut crate::params::ParamBuilder<'_>,
        channels: usize,
        token_dim: usize,
        hidden: usize,
        heads: usize,
    ) -> Result<Self> {
        if heads == 0 || hidden % heads != 0 {
            return Err(Error::Spec(format!("{hidden} hidden dims over {heads} heads")));
        }
        Ok(Self {
            q: Linear::new(&mut pb.scope("q"), channels, hidden)?,
            k: Linear::new(&mut pb.scope("k"), token_dim, hidden)?,
            v: Linear::new(&mut pb.scope("v"), token_dim, hidden)?,
            out: Linear::new(&mut pb.scope("out"), hidden, channels)?,
            heads,
            hidden,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// The query, key, value and output projections.
    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.out]
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (b, n, _) = t.dims3()?;
        Ok(t
            .reshape((b, n, self.heads, self.hidden / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    fn queries(&self, x: &Tensor) -> Result<(Tensor, (usize, usize, usize, usize))> {
        let (b, c, h, w) = x.dims4()?;
        let tokens = x.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        Ok((self.split_heads(&self.q.forward(&tokens)?)?, (b, c, h, w)))
    }

    /// Softmax attention weights, `B x heads x n x m`.
    pub fn weights(&self, x: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (q, _) = self.queries(x)?;
        let k = self.split_heads(&self.k.forward(tokens)?)?;
        let scale = 1.0 / ((self.hidden / self.heads) as f64).sqrt();
        let logits = (q.matmul(&k.t()?)? * scale)?;
        Ok(candle_nn::ops::softmax(&logits, D::Minus1)?)
    }

    /// `x + W_o · softmax(Q Kᵀ / √d_k) V` with `x` as `B x c x h x w`, `tokens` as `B x m x d_f`.
    pub fn forward(&self, x: &Tensor, tokens: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if tokens.dim(0)? != b {
            return Err(Error::Shape(format!(
                "feature batch of {} for image batch of {b}",
                tokens.dim(0)?
            )));
        }
        let attn = self.weights(x, tokens)?;
        let v = self.split_heads(&self.v.forward(tokens)?)?;
        let mixed = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, h * w, self.hidden))?;
        let projected = self
            .out
            .forward(&mixed)?
            .transpose(1, 2)?
            .reshape((b, c, h, w))?;
        Ok((x + projected)?)
    }

    /// `forward` with input validation: rejects non-finite queries or tokens.
    pub fn cross_attend(&self, x: &Tensor, features: &FeatureBatch) -> Result<Tensor> {
        for (what, t) in [("query grid", x), ("feature tokens", &features.tokens)] {
            let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            if !v.iter().all(|x| x.is_finite()) {
                return Err(Error::NonFinite(what.into()));
            }
        }
        self.forward(x, &features.tokens)
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Res(ResBlock),
    Attn(Option<CrossAttention>),
    Down(Conv2d),
    Up(Conv2d),
}

#[derive(Debug, Clone)]
struct Stage {
    plan: StagePlan,
    layers: Vec<Layer>,
}

#[derive(Debug)]
pub struct Generator {
    spec: GeneratorSpec,
    token_dim: Option<usize>,
    params: ParamStore,
    stem: Conv2d,
    stages: Vec<Stage>,
    head_norm: GroupNorm,
    head: Conv2d,
}

/// RNG stream reserved for generator initialization.
pub const GENERATOR_STREAM: u64 = 1;

impl Generator {
    /// Builds the network. `token_dim` is the extractor's channel width, or `None` when the
    /// extractor is disabled, in which case attention sites carry no parameters and pass through.
    pub fn new(
        spec: &GeneratorSpec,
        token_dim: Option<usize>,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new(dtype);
        let mut rng = seeded_rng(seed, GENERATOR_STREAM);
        let mut pb = params.builder(&mut rng);
        let groups = spec.norm_groups;
        let act = spec.activation;

        let stem = Conv2d::new(&mut pb.scope("stem"), spec.in_channels, spec.widths[0], 3, 1, 1)?;
        let mut stages = Vec::new();
        for plan in spec.plan() {
            let mut sp = pb.scope(plan.name());
            let mut layers = Vec::new();
            for (i, layer) in plan.layers.iter().enumerate() {
                let mut lp = sp.scope(i.to_string());
                layers.push(match *layer {
                    LayerPlan::Res { cin, cout } => Layer::Res(ResBlock {
                        norm1: GroupNorm::new(&mut lp.scope("norm1"), cin, groups)?,
                        conv1: Conv2d::new(&mut lp.scope("conv1"), cin, cout, 3, 1, 1)?,
                        norm2: GroupNorm::new(&mut lp.scope("norm2"), cout, groups)?,
                        conv2: Conv2d::new(&mut lp.scope("conv2"), cout, cout, 3, 1, 1)?,
                        shortcut: if cin != cout {
                            Some(Conv2d::new(&mut lp.scope("shortcut"), cin, cout, 1, 1, 0)?)
                        } else {
                            None
                        },
                        act,
                    }),
                    LayerPlan::Attn { hidden, heads } => Layer::Attn(match token_dim {
                        Some(d) => Some(CrossAttention::new(
                            &mut lp.scope("attn"),
                            spec.widths[2],
                            d,
                            hidden,
                            heads,
                        )?),
                        None => None,
                    }),
                    LayerPlan::Down(c) => Layer::Down(Conv2d::new(&mut lp.scope("down"), c, c, 3, 2, 1)?),
                    LayerPlan::Up(c) => Layer::Up(Conv2d::new(&mut lp.scope("up"), c, c, 3, 1, 1)?),
                });
            }
            stages.push(Stage { plan, layers });
        }
        let head_norm = GroupNorm::new(&mut pb.scope("head.norm"), spec.widths[0], groups)?;
        let head = Conv2d::new(&mut pb.scope("head.conv"), spec.widths[0], spec.out_channels, 3, 1, 1)?;
        drop(pb);
        log::debug!("generator built with {} parameters", params.num_parameters());
        Ok(Self {
            spec: spec.clone(),
            token_dim,
            params,
            stem,
            stages,
            head_norm,
            head,
        })
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn token_dim(&self) -> Option<usize> {
        self.token_dim
    }

    pub fn attention_sites(&self) -> Vec<(String, &CrossAttention)> {
        let mut out = Vec::new();
        for s in &self.stages {
            for l in &s.layers {
                if let Layer::Attn(Some(a)) = l {
                    out.push((s.plan.name(), a));
                }
            }
        }
        out
    }

    /// Maps `B x 3 x H x W` RGB in `[0, 1]` to `B x out x H x W` in `[0, 1]`.
    /// `H` and `W` must be divisible by 8.
    pub fn forward(&self, rgb: &Tensor, features: Option<&FeatureBatch>) -> Result<Tensor> {
        let (b, c, h, w) = rgb.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {c}",
                self.spec.in_channels
            )));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::Shape(format!("input {h}x{w} is not divisible by 8")));
        }
        let tokens = match (self.token_dim, features) {
            (Some(d), Some(f)) => {
                if f.len() != b {
                    return Err(Error::Shape(format!(
                        "{} feature maps for a batch of {b} images",
                        f.len()
                    )));
                }
                if f.token_dim() != d {
                    return Err(Error::Shape(format!(
                        "feature width {} but generator was built for {d}",
                        f.token_dim()
                    )));
                }
                Some(f.tokens.to_dtype(rgb.dtype())?)
            }
            _ => None,
        };

        let mut x = self.stem.forward(rgb)?;
        let mut encoder_out: Vec<Tensor> = Vec::new();
        for stage in &self.stages {
            for layer in &stage.layers {
                x = match layer {
                    Layer::Res(r) => r.forward(&x)?,
                    Layer::Attn(Some(a)) => match &tokens {
                        Some(t) => a.forward(&x, t)?,
                        None => x,
                    },
                    Layer::Attn(None) => x,
                    Layer::Down(conv) => conv.forward(&x)?,
                    Layer::Up(conv) => {
                        let (_, _, sh, sw) = x.dims4()?;
                        conv.forward(&x.upsample_nearest2d(sh * 2, sw * 2)?)?
                    }
                };
            }
            match stage.plan.section {
                Section::Encoder => encoder_out.push(x.clone()),
                Section::Decoder if self.spec.skip == SkipPolicy::Additive => {
                    if let Some(&(_, src)) = SKIPS.iter().find(|(d, _)| *d == stage.plan.index) {
                        x = (x + &encoder_out[src - 1])?;
                    }
                }
                _ => {}
            }
        }
        let y = self
            .head
            .forward(&self.spec.activation.apply(&self.head_norm.forward(&x)?)?)?;
        Ok(candle_nn::ops::sigmoid(&y)?)
    }

    /// Spatial size after every block for a square input of side `size`.
    pub fn spatial_trace(&self, size: usize) -> Vec<(String, usize)> {
        let mut s = size;
        let mut out = Vec::new();
        for stage in &self.stages {
            for l in &stage.plan.layers {
                match l {
                    LayerPlan::Down(_) => s /= 2,
                    LayerPlan::Up(_) => s *= 2,
                    _ => {}
                }
            }
            out.push((stage.plan.name(), s));
        }
        out
    }
}
