//! RGB to near-infrared / long-wave-infrared image translation.
//!
//! A convolutional encoder-bottleneck-decoder generator is conditioned on tokens from a frozen
//! feature extractor through cross-attention, and trained against three patch discriminators at
//! successively halved resolutions with adversarial, feature-matching and SSIM objectives.

pub mod backbone;
pub mod blob;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod extractor;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod params;
pub mod schedule;
pub mod trainer;

pub use error::{Error, Result};
pub use config::RunConfig;
pub use data::{Image, ImagePair};
pub use discriminator::MultiScaleDiscriminator;
pub use generator::Generator;
pub use metrics::MetricReport;
pub use trainer::{fit, Trainer, Translator};
