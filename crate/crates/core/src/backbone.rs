//! Frozen convolutional pyramids used as feature providers.
//!
//! The same structure backs the externally supplied extractor backbones and the metric
//! backends. A stack is a sequence of stride-2 convolutions with ReLU between stages, stored in
//! a parameter blob as `stages.{i}.weight` (`[out, in, k, k]`) and `stages.{i}.bias` (`[out]`).

use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand_distr::{Distribution, Normal};

use crate::blob::{read_blob, BlobTensor};
use crate::error::{Error, Result};
use crate::params::seeded_rng;

pub const WEIGHTS_DIR_ENV: &str = "PIX2NEXT_WEIGHTS_DIR";

/// Root of the local weight registry: `$PIX2NEXT_WEIGHTS_DIR`, else `~/.cache/pix2next/weights`.
pub fn registry_root() -> PathBuf {
    if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
        return PathBuf::from(dir);
    }
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_default();
    home.join(".cache").join("pix2next").join("weights")
}

/// Resolves a weights reference: an explicit file path, or a registry key (`<root>/<key>.bin`).
/// An empty reference falls back to `default_key`.
pub fn resolve_weights(reference: &str, default_key: &str) -> PathBuf {
    let looks_like_path = reference.contains(std::path::MAIN_SEPARATOR)
        || reference.contains('/')
        || reference.ends_with(".bin");
    if looks_like_path {
        return PathBuf::from(reference);
    }
    let key = if reference.is_empty() {
        default_key
    } else {
        reference
    };
    registry_root().join(format!("{key}.bin"))
}

#[derive(Debug, Clone)]
struct Stage {
    weight: Tensor,
    bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct ConvPyramid {
    stages: Vec<Stage>,
}

impl ConvPyramid {
    /// Random fixed pyramid; `widths[0]` is the input channel count.
    pub fn seeded(widths: &[usize], kernel: usize, seed: u64, stream: u64) -> Result<Self> {
        let mut rng = seeded_rng(seed, stream);
        let mut stages = Vec::new();
        for pair in widths.windows(2) {
            let (cin, cout) = (pair[0], pair[1]);
            // He-style scaling keeps activations from collapsing through the ReLUs.
            let std = (2.0 / (cin * kernel * kernel) as f64).sqrt();
            let dist = Normal::new(0.0, std).map_err(|e| Error::Spec(e.to_string()))?;
            let n = cout * cin * kernel * kernel;
            let w: Vec<f32> = (0..n).map(|_| dist.sample(&mut rng) as f32).collect();
            let b: Vec<f32> = (0..cout).map(|_| dist.sample(&mut rng) as f32 * 0.1).collect();
            stages.push(Stage {
                weight: Tensor::from_vec(w, (cout, cin, kernel, kernel), &Device::Cpu)?,
                bias: Tensor::from_vec(b, cout, &Device::Cpu)?,
            });
        }
        Ok(Self { stages })
    }

    pub fn from_blob(path: &Path, tensors: &[BlobTensor]) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptBlob {
            path: path.to_path_buf(),
            reason,
        };
        let find = |name: &str| tensors.iter().find(|t| t.name == name);
        let mut stages = Vec::new();
        let mut prev_out = 3;
        for i in 0.. {
            let Some(w) = find(&format!("stages.{i}.weight")) else {
                break;
            };
            let b = find(&format!("stages.{i}.bias"))
                .ok_or_else(|| corrupt(format!("stage {i} has no bias")))?;
            let [o, c, k1, k2] = w.shape[..] else {
                return Err(corrupt(format!("stage {i} weight must be 4-D")));
            };
            if c != prev_out || k1 != k2 || b.shape != [o] {
                return Err(corrupt(format!("stage {i} shapes are inconsistent")));
            }
            prev_out = o;
            stages.push(Stage {
                weight: Tensor::from_slice(&w.data, (o, c, k1, k2), &Device::Cpu)?,
                bias: Tensor::from_slice(&b.data, o, &Device::Cpu)?,
            });
        }
        if stages.is_empty() {
            return Err(corrupt("no `stages.0.weight` tensor".into()));
        }
        Ok(Self { stages })
    }

    pub fn load(path: &Path, backbone: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingWeights {
                backbone: backbone.to_string(),
                path: path.to_path_buf(),
            });
        }
        Self::from_blob(path, &read_blob(path)?)
    }

    /// The pyramid in the blob layout [`ConvPyramid::from_blob`] reads.
    pub fn to_blob(&self) -> Result<Vec<BlobTensor>> {
        let mut out = Vec::with_capacity(2 * self.stages.len());
        for (i, s) in self.stages.iter().enumerate() {
            for (part, t) in [("weight", &s.weight), ("bias", &s.bias)] {
                let data = t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
                out.push(BlobTensor::new(format!("stages.{i}.{part}"), t.dims().to_vec(), data));
            }
        }
        Ok(out)
    }

    pub fn out_channels(&self) -> usize {
        self.stages.last().map(|s| s.weight.dims()[0]).unwrap_or(3)
    }

    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Activations after every stage, computed in f32 without gradient tracking.
    pub fn forward_all(&self, xs: &Tensor) -> Result<Vec<Tensor>> {
        let mut x = xs.detach().to_dtype(DType::F32)?;
        let mut out = Vec::with_capacity(self.stages.len());
        let last = self.stages.len() - 1;
        for (i, s) in self.stages.iter().enumerate() {
            let k = s.weight.dims()[2];
            x = crate::conv::conv2d(&x, &s.weight, 2, k / 2)?
                .broadcast_add(&s.bias.reshape((1, s.bias.dim(0)?, 1, 1))?)?;
            if i != last {
                x = x.relu()?;
            }
            out.push(x.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blob::write_blob;

    #[test]
    fn pyramid_halves_per_stage() {
        let p = ConvPyramid::seeded(&[3, 8, 16], 3, 0, 0).unwrap();
        let x = Tensor::zeros((2, 3, 32, 32), DType::F32, &Device::Cpu).unwrap();
        let outs = p.forward_all(&x).unwrap();
        assert_eq!(outs[0].dims(), [2, 8, 16, 16]);
        assert_eq!(outs[1].dims(), [2, 16, 8, 8]);
    }

    #[test]
    fn loads_from_blob_and_rejects_missing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bb.bin");
        assert!(matches!(
            ConvPyramid::load(&path, "resnet"),
            Err(Error::MissingWeights { .. })
        ));
        write_blob(
            &path,
            &[
                BlobTensor::new("stages.0.weight", vec![4, 3, 3, 3], vec![0.1; 108]),
                BlobTensor::new("stages.0.bias", vec![4], vec![0.0; 4]),
            ],
        )
        .unwrap();
        let p = ConvPyramid::load(&path, "resnet").unwrap();
        assert_eq!(p.out_channels(), 4);

        write_blob(&path, &[BlobTensor::new("other", vec![1], vec![0.0])]).unwrap();
        assert!(matches!(
            ConvPyramid::load(&path, "resnet"),
            Err(Error::CorruptBlob { .. })
        ));
    }

    #[test]
    fn blob_round_trip_preserves_activations() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("seeded.bin");
        let p = ConvPyramid::seeded(&[3, 4, 8], 3, 5, 1).unwrap();
        write_blob(&path, &p.to_blob().unwrap()).unwrap();
        let q = ConvPyramid::load(&path, "vit").unwrap();
        let x = Tensor::rand(0f32, 1.0, (1, 3, 16, 16), &Device::Cpu).unwrap();
        let a = p.forward_all(&x).unwrap().pop().unwrap();
        let b = q.forward_all(&x).unwrap().pop().unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn weight_references_resolve() {
        assert_eq!(resolve_weights("/tmp/x.bin", "vit"), PathBuf::from("/tmp/x.bin"));
        assert!(resolve_weights("", "vit").ends_with("vit.bin"));
        assert!(resolve_weights("swin-large", "swinv2").ends_with("swin-large.bin"));
    }
}
