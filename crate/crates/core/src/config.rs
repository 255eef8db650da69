//! Run configuration: TOML sections, dotted-key overrides and validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Augment, BatchSpec, Layout};
use crate::discriminator::DiscriminatorSpec;
use crate::error::{Error, Result};
use crate::extractor::{Backbone, ExtractorSpec, BACKBONE_INPUT};
use crate::generator::{AttentionPlacement, GeneratorSpec};
use crate::losses::{GanMode, LossWeights, SsimParams};
use crate::optim::AdamConfig;
use crate::schedule::CosineWarmup;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub root: PathBuf,
    pub layout: Layout,
    /// `[height, width]`, each divisible by 8.
    pub resize: [usize; 2],
    pub augment: Augment,
    /// Keep decoded pairs in memory across epochs.
    pub cache: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: PathBuf::from("data"),
            layout: Layout::PairedSubdirs,
            resize: [256, 256],
            augment: Augment::None,
            cache: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub feature_matching: f64,
    pub ssim: f64,
    pub gan_mode: GanMode,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        let s = SsimParams::default();
        Self {
            feature_matching: w.feature_matching,
            ssim: w.ssim,
            gan_mode: GanMode::Bce,
            ssim_window: s.window,
            ssim_sigma: s.sigma,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            feature_matching: self.feature_matching,
            ssim: self.ssim,
        }
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams {
            window: self.ssim_window,
            sigma: self.ssim_sigma,
            ..SsimParams::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Total optimizer steps; 0 derives the total from `epochs`.
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f64,
    pub lr_d: f64,
    /// Warmup length as a fraction of the total steps.
    pub warmup_frac: f64,
    pub min_lr_frac: f64,
    pub seed: u64,
    /// Save a checkpoint every this many steps; 0 saves only at the end.
    pub checkpoint_every: u64,
    pub attention: AttentionPlacement,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            iterations: 0,
            batch_size: 1,
            lr_g: 1e-4,
            lr_d: 1e-4,
            warmup_frac: 0.05,
            min_lr_frac: 0.01,
            seed: 0,
            checkpoint_every: 0,
            attention: AttentionPlacement::EncoderBottleneckDecoder,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self, batches_per_epoch: usize) -> u64 {
        if self.iterations > 0 {
            self.iterations
        } else {
            self.epochs * batches_per_epoch as u64
        }
    }

    pub fn warmup_steps(&self, total: u64) -> u64 {
        (self.warmup_frac * total as f64).floor() as u64
    }

    pub fn schedules(&self, total: u64) -> Result<(CosineWarmup, CosineWarmup)> {
        let warmup = self.warmup_steps(total);
        Ok((
            CosineWarmup::new(self.lr_g, warmup, total, self.min_lr_frac)?,
            CosineWarmup::new(self.lr_d, warmup, total, self.min_lr_frac)?,
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub extractor: ExtractorSpec,
    pub generator: GeneratorSpec,
    pub discriminator: DiscriminatorSpec,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config(format!("at `{path}`: {}", e.into_inner()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Generator spec with the attention placement taken from `[train]`.
    pub fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            attention: self.train.attention,
            ..self.generator.clone()
        }
    }

    pub fn resize(&self) -> (usize, usize) {
        (self.data.resize[0], self.data.resize[1])
    }

    pub fn batch_spec(&self) -> BatchSpec {
        BatchSpec {
            batch_size: self.train.batch_size,
            seed: self.train.seed,
            resize: self.resize(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.batch_spec().validate()?;
        self.generator_spec().validate()?;
        self.discriminator.validate()?;
        self.train.adam.validate()?;
        let t = &self.train;
        if !(t.lr_g > 0.0 && t.lr_d > 0.0) {
            return Err(Error::Config("train.lr_g and train.lr_d must be positive".into()));
        }
        if !(0.0..1.0).contains(&t.warmup_frac) {
            return Err(Error::Config("train.warmup_frac must lie in [0, 1)".into()));
        }
        if t.epochs == 0 && t.iterations == 0 {
            return Err(Error::Config("one of train.epochs or train.iterations must be positive".into()));
        }
        let (h, w) = self.resize();
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config("data.resize must allow two exact halvings".into()));
        }
        if !self.discriminator.accepts(h.min(w) / 4) {
            return Err(Error::Config(format!(
                "data.resize {h}x{w} is too small for the coarsest discriminator"
            )));
        }
        let external = self.extractor.enabled && self.extractor.backbone != Backbone::IdentityStub;
        if external && (h, w) != (BACKBONE_INPUT, BACKBONE_INPUT) {
            return Err(Error::Config(format!(
                "extractor.backbone `{}` needs data.resize [{BACKBONE_INPUT}, {BACKBONE_INPUT}]",
                self.extractor.backbone.name()
            )));
        }
        if self.loss.ssim_window > h.min(w) {
            return Err(Error::Config("loss.ssim_window exceeds the image size".into()));
        }
        Ok(())
    }

    /// Applies `section.key=value` overrides. Keys must already exist in the schema; values are
    /// parsed as TOML literals, falling back to bare strings.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let text = self.to_toml_string()?;
        let mut root: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for (key, raw) in overrides {
            let parts: Vec<&str> = key.split('.').collect();
            let (last, parents) = parts.split_last().expect("split yields one part");
            let mut table = &mut root;
            for p in parents {
                table = match table.get_mut(*p) {
                    Some(toml::Value::Table(t)) => t,
                    _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
                };
            }
            let Some(existing) = table.get(*last) else {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            };
            let value = parse_override(raw, existing);
            table.insert(last.to_string(), value);
        }
        let text = toml::to_string(&root).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }
}

fn parse_override(raw: &str, existing: &toml::Value) -> toml::Value {
    if existing.is_str() {
        return toml::Value::String(raw.to_string());
    }
    let parsed: Option<toml::Value> = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    match (parsed, existing) {
        (Some(toml::Value::Integer(i)), toml::Value::Float(_)) => toml::Value::Float(i as f64),
        (Some(v), _) => v,
        (None, _) => toml::Value::String(raw.to_string()),
    }
}
