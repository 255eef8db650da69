//! Evaluation battery: PSNR, SSIM, RMSE and error-map STD computed natively; FID, LPIPS and DISTS
//! over a pluggable feature backend.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::backbone::{resolve_weights, ConvPyramid};
use crate::data::{load_target, Image};
use crate::error::{Error, Result};
use crate::losses::{scalar, ssim, SsimParams};
use crate::trainer::list_images;

/// PSNR of identical images.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

/// Names in report order; `fid` is corpus-level.
pub const METRICS: [&str; 7] = ["psnr", "ssim", "fid", "rmse", "lpips", "dists", "std"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    HigherBetter,
    LowerBetter,
}

impl Direction {
    pub fn arrow(self) -> &'static str {
        match self {
            Direction::HigherBetter => "↑",
            Direction::LowerBetter => "↓",
        }
    }
}

pub fn direction(metric: &str) -> Direction {
    match metric {
        "psnr" | "ssim" => Direction::HigherBetter,
        _ => Direction::LowerBetter,
    }
}

fn check_same(gen: &Image, gt: &Image) -> Result<()> {
    if (gen.channels, gen.height, gen.width) != (gt.channels, gt.height, gt.width) {
        return Err(Error::Shape(format!(
            "generated {}x{}x{} vs ground truth {}x{}x{}",
            gen.channels, gen.height, gen.width, gt.channels, gt.height, gt.width
        )));
    }
    Ok(())
}

fn mse(gen: &Image, gt: &Image) -> Result<f64> {
    check_same(gen, gt)?;
    let sum: f64 = gen
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / gen.data.len() as f64)
}

/// `10·log10(1 / MSE)` for `[0, 1]` images; [`PSNR_IDENTICAL`] when the images are equal.
pub fn psnr(gen: &Image, gt: &Image) -> Result<f64> {
    let m = mse(gen, gt)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Root mean squared error in 8-bit units.
pub fn rmse(gen: &Image, gt: &Image) -> Result<f64> {
    Ok(mse(gen, gt)?.sqrt() * 255.0)
}

/// Standard deviation of the error map `gen - gt`, in 8-bit units.
pub fn pixel_std(gen: &Image, gt: &Image) -> Result<f64> {
    check_same(gen, gt)?;
    let n = gen.data.len() as f64;
    let err: Vec<f64> = gen
        .data
        .iter()
        .zip(&gt.data)
        .map(|(&a, &b)| a as f64 - b as f64)
        .collect();
    let mean = err.iter().sum::<f64>() / n;
    let var = err.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() * 255.0)
}

fn image_tensor(img: &Image, dtype: DType) -> Result<Tensor> {
    img.to_tensor(dtype)
}

/// Mean SSIM through the same implementation the training loss uses, in f64.
pub fn ssim_metric(gen: &Image, gt: &Image) -> Result<f64> {
    check_same(gen, gt)?;
    let a = image_tensor(gen, DType::F64)?;
    let b = image_tensor(gt, DType::F64)?;
    scalar(&ssim(&a, &b, &SsimParams::default())?)
}

/// Gaussian fit of a set of embeddings.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub count: usize,
}

impl GaussianStats {
    /// `features` holds one embedding per row. The covariance is the unbiased estimate.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self> {
        let n = features.len();
        if n < 2 {
            return Err(Error::Metric(format!("need at least 2 embeddings, got {n}")));
        }
        let d = features[0].len();
        if features.iter().any(|f| f.len() != d) {
            return Err(Error::Metric("embeddings differ in length".into()));
        }
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n as f64;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        cov /= (n - 1) as f64;
        Ok(Self { mean, cov, count: n })
    }
}

/// Smallest eigenvalue still treated as rounding noise around zero.
const EIGEN_TOLERANCE: f64 = -1e-8;
const JITTER: f64 = 1e-6;

/// Eigenvalues of a symmetric matrix, clamping tiny negatives to zero.
fn psd_eigen(m: &DMatrix<f64>) -> Option<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    for v in eig.eigenvalues.iter_mut() {
        if *v < EIGEN_TOLERANCE {
            return None;
        }
        *v = v.max(0.0);
    }
    Some(eig)
}

fn sqrt_psd(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let eig = psd_eigen(m)?;
    let s = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Some(&eig.eigenvectors * s * eig.eigenvectors.transpose())
}

/// `Tr((Σ1 Σ2)^{1/2})` via the symmetric form `(Σ1^{1/2} Σ2 Σ1^{1/2})^{1/2}`.
fn trace_sqrt_product(s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Option<f64> {
    let a = sqrt_psd(s1)?;
    let m = &a * s2 * &a;
    Some(psd_eigen(&m)?.eigenvalues.iter().map(|v| v.sqrt()).sum())
}

/// `‖μ1 − μ2‖² + Tr(Σ1 + Σ2 − 2 (Σ1 Σ2)^{1/2})`.
pub fn frechet_distance(
    mu1: &DVector<f64>,
    sigma1: &DMatrix<f64>,
    mu2: &DVector<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<f64> {
    let d = mu1.len();
    if mu2.len() != d || sigma1.shape() != (d, d) || sigma2.shape() != (d, d) {
        return Err(Error::Metric("Fréchet distance inputs differ in dimension".into()));
    }
    let diff = (mu1 - mu2).norm_squared();
    let covmean = match trace_sqrt_product(sigma1, sigma2) {
        Some(t) => t,
        None => {
            let eye = DMatrix::<f64>::identity(d, d) * JITTER;
            let t = trace_sqrt_product(&(sigma1 + &eye), &(sigma2 + &eye)).ok_or_else(|| {
                Error::Metric("covariance product is not positive semi-definite".into())
            })?;
            log::warn!("covariance product near-singular; added {JITTER} diagonal jitter");
            t
        }
    };
    Ok(diff + sigma1.trace() + sigma2.trace() - 2.0 * covmean)
}

pub fn fid(gen: &GaussianStats, gt: &GaussianStats) -> Result<f64> {
    frechet_distance(&gen.mean, &gen.cov, &gt.mean, &gt.cov)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BackendKind {
    InceptionLike,
    #[default]
    LightweightStub,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureBackendSpec {
    pub kind: BackendKind,
    /// Weights file or registry key; empty uses the kind's default key.
    pub weights: String,
    /// Embedding width used by FID; must match the backend's last stage.
    pub embedding_dim: usize,
    pub seed: u64,
}

impl Default for FeatureBackendSpec {
    fn default() -> Self {
        Self {
            kind: BackendKind::LightweightStub,
            weights: String::new(),
            embedding_dim: STUB_WIDTHS[STUB_WIDTHS.len() - 1],
            seed: 0,
        }
    }
}

/// Channel widths of the stub pyramid, input first.
pub const STUB_WIDTHS: [usize; 4] = [3, 16, 32, 64];
const STUB_STREAM: u64 = 0x5EED_0100;

/// Frozen convolutional feature provider for FID, LPIPS and DISTS.
#[derive(Debug, Clone)]
pub struct FeatureBackend {
    name: String,
    pyramid: ConvPyramid,
}

impl FeatureBackend {
    pub fn stub(seed: u64) -> Result<Self> {
        Ok(Self {
            name: "lightweight-stub".into(),
            pyramid: ConvPyramid::seeded(&STUB_WIDTHS, 3, seed, STUB_STREAM)?,
        })
    }

    pub fn from_spec(spec: &FeatureBackendSpec) -> Result<Self> {
        let backend = match spec.kind {
            BackendKind::LightweightStub => Self::stub(spec.seed)?,
            BackendKind::InceptionLike => {
                let path = resolve_weights(&spec.weights, "inception-like");
                Self {
                    name: "inception-like".into(),
                    pyramid: ConvPyramid::load(&path, "inception-like")?,
                }
            }
        };
        if backend.embedding_dim() != spec.embedding_dim {
            return Err(Error::Metric(format!(
                "{} produces {}-d embeddings, config expects {}",
                backend.name,
                backend.embedding_dim(),
                spec.embedding_dim
            )));
        }
        Ok(backend)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn embedding_dim(&self) -> usize {
        self.pyramid.out_channels()
    }

    /// Activations for a single-channel image replicated to RGB and mapped to `[-1, 1]`.
    pub fn activations(&self, img: &Image) -> Result<Vec<Tensor>> {
        let x = image_tensor(img, DType::F32)?;
        let x = match img.channels {
            1 => x.repeat((1, 3, 1, 1))?,
            3 => x,
            c => return Err(Error::Shape(format!("cannot embed a {c}-channel image"))),
        };
        let x = x.affine(2.0, -1.0)?;
        Ok(self.pyramid.forward_all(&x)?)
    }

    /// Global average pool of the last stage.
    pub fn embed(&self, img: &Image) -> Result<Vec<f64>> {
        let acts = self.activations(img)?;
        let last = acts.last().expect("pyramid has stages");
        Ok(last
            .mean((2, 3))?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1()?)
    }
}

/// Channels-by-pixels matrix of one activation, in f64.
fn layer_matrix(t: &Tensor) -> Result<(usize, usize, Vec<f64>)> {
    let (_, c, h, w) = t.dims4()?;
    let v = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    Ok((c, h * w, v))
}

/// Squared distance between channel-normalized activations, averaged over positions and
/// summed over layers (uniform channel weights).
pub fn lpips(gen: &Image, gt: &Image, backend: &FeatureBackend) -> Result<f64> {
    check_same(gen, gt)?;
    let (a, b) = (backend.activations(gen)?, backend.activations(gt)?);
    let mut total = 0.0;
    for (la, lb) in a.iter().zip(&b) {
        let (c, n, va) = layer_matrix(la)?;
        let (_, _, vb) = layer_matrix(lb)?;
        let mut layer = 0.0;
        for p in 0..n {
            let norm = |v: &[f64]| (0..c).map(|ch| v[ch * n + p].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(&va), norm(&vb));
            layer += (0..c)
                .map(|ch| (va[ch * n + p] / na - vb[ch * n + p] / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / n as f64;
    }
    Ok(total)
}

const DISTS_C1: f64 = 1e-6;
const DISTS_C2: f64 = 1e-6;

/// One minus the mean of texture (channel means) and structure (channel covariances)
/// similarities over the input and every backend stage.
pub fn dists(gen: &Image, gt: &Image, backend: &FeatureBackend) -> Result<f64> {
    check_same(gen, gt)?;
    let to3 = |img: &Image| -> Result<Tensor> {
        let t = image_tensor(img, DType::F32)?;
        Ok(if img.channels == 1 { t.repeat((1, 3, 1, 1))? } else { t })
    };
    let mut a = vec![to3(gen)?];
    a.extend(backend.activations(gen)?);
    let mut b = vec![to3(gt)?];
    b.extend(backend.activations(gt)?);
    let mut sim = 0.0;
    for (la, lb) in a.iter().zip(&b) {
        let (c, n, va) = layer_matrix(la)?;
        let (_, _, vb) = layer_matrix(lb)?;
        let mut layer = 0.0;
        for ch in 0..c {
            let xa = &va[ch * n..(ch + 1) * n];
            let xb = &vb[ch * n..(ch + 1) * n];
            let ma = xa.iter().sum::<f64>() / n as f64;
            let mb = xb.iter().sum::<f64>() / n as f64;
            let (mut sa, mut sb, mut sab) = (0.0, 0.0, 0.0);
            for (x, y) in xa.iter().zip(xb) {
                sa += (x - ma).powi(2);
                sb += (y - mb).powi(2);
                sab += (x - ma) * (y - mb);
            }
            let (sa, sb, sab) = (sa / n as f64, sb / n as f64, sab / n as f64);
            let texture = (2.0 * ma * mb + DISTS_C1) / (ma * ma + mb * mb + DISTS_C1);
            let structure = (2.0 * sab + DISTS_C2) / (sa + sb + DISTS_C2);
            layer += 0.5 * texture + 0.5 * structure;
        }
        sim += layer / c as f64;
    }
    Ok(1.0 - sim / a.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub psnr: f64,
    pub ssim: f64,
    pub rmse: f64,
    pub std: f64,
    pub lpips: Option<f64>,
    pub dists: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    /// Sample standard deviation (0 for a single value).
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 || !mean.is_finite() {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self {
            mean,
            std,
            count: values.len(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// `(id, row)` sorted by id.
    pub rows: Vec<(String, MetricRow)>,
    pub fid: Option<f64>,
    /// Backend used for the learned metrics, if any.
    pub backend: Option<String>,
    /// Metric name to the reason it was not computed.
    pub skipped: BTreeMap<String, String>,
}

impl MetricReport {
    pub fn column(&self, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter_map(|(_, r)| match metric {
                "psnr" => Some(r.psnr),
                "ssim" => Some(r.ssim),
                "rmse" => Some(r.rmse),
                "std" => Some(r.std),
                "lpips" => r.lpips,
                "dists" => r.dists,
                _ => None,
            })
            .collect()
    }

    pub fn aggregates(&self) -> BTreeMap<String, Aggregate> {
        let mut out = BTreeMap::new();
        for m in ["psnr", "ssim", "rmse", "std", "lpips", "dists"] {
            if let Some(a) = Aggregate::of(&self.column(m)) {
                out.insert(m.to_string(), a);
            }
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("id,psnr,ssim,rmse,std,lpips,dists\n");
        for (id, r) in &self.rows {
            s.push_str(&format!(
                "{id},{},{},{},{},{},{}\n",
                fmt_num(r.psnr),
                fmt_num(r.ssim),
                fmt_num(r.rmse),
                fmt_num(r.std),
                r.lpips.map(fmt_num).unwrap_or_default(),
                r.dists.map(fmt_num).unwrap_or_default()
            ));
        }
        s
    }

    pub fn to_json(&self) -> Value {
        let rows: Vec<Value> = self
            .rows
            .iter()
            .map(|(id, r)| {
                json!({
                    "id": id,
                    "psnr": json_num(r.psnr),
                    "ssim": json_num(r.ssim),
                    "rmse": json_num(r.rmse),
                    "std": json_num(r.std),
                    "lpips": r.lpips.map(json_num),
                    "dists": r.dists.map(json_num),
                })
            })
            .collect();
        let aggregates: serde_json::Map<String, Value> = self
            .aggregates()
            .into_iter()
            .map(|(k, a)| {
                (
                    k,
                    json!({"mean": json_num(a.mean), "std": json_num(a.std), "count": a.count}),
                )
            })
            .collect();
        let directions: serde_json::Map<String, Value> = METRICS
            .iter()
            .map(|m| (m.to_string(), json!(direction(m))))
            .collect();
        json!({
            "count": self.rows.len(),
            "backend": self.backend,
            "fid": self.fid.map(json_num),
            "aggregates": aggregates,
            "directions": directions,
            "skipped": self.skipped,
            "rows": rows,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let js = dir.join("report.json");
        let text = serde_json::to_string_pretty(&self.to_json()).expect("json values serialize");
        fs::write(&js, text).map_err(|e| Error::io(&js, e))?;
        Ok((csv, js))
    }

    /// Aggregate table with better-direction arrows.
    pub fn table(&self) -> String {
        let aggs = self.aggregates();
        let mut s = format!("{:<8} {:>12} {:>12}\n", "metric", "mean", "std");
        for m in METRICS {
            let label = format!("{} {}", m.to_uppercase(), direction(m).arrow());
            let line = if m == "fid" {
                match self.fid {
                    Some(v) => format!("{label:<8} {:>12}\n", fmt_fixed(v)),
                    None => format!("{label:<8} {:>12}\n", "skipped"),
                }
            } else {
                match aggs.get(m) {
                    Some(a) => format!("{label:<8} {:>12} {:>12}\n", fmt_fixed(a.mean), fmt_fixed(a.std)),
                    None => format!("{label:<8} {:>12}\n", "skipped"),
                }
            };
            s.push_str(&line);
        }
        s
    }
}

fn fmt_num(v: f64) -> String {
    if v.is_infinite() {
        if v > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{v}")
    }
}

fn fmt_fixed(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        fmt_num(v)
    }
}

fn json_num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(fmt_num(v))
    }
}

/// Which learned metrics to compute.
#[derive(Debug, Clone, Default)]
pub enum Backends {
    /// Pixel metrics only; LPIPS, DISTS and FID are reported as skipped.
    None,
    #[default]
    Stub,
    Spec(FeatureBackendSpec),
}

/// Evaluates filename-matched directories. Every generated image must have a ground truth and
/// vice versa, otherwise nothing is reported.
pub fn evaluate_dirs(gen_dir: &Path, gt_dir: &Path, backends: &Backends) -> Result<MetricReport> {
    let index = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        Ok(list_images(dir)?
            .into_iter()
            .map(|p| (p.file_stem().unwrap_or_default().to_string_lossy().into_owned(), p))
            .collect())
    };
    let gen = index(gen_dir)?;
    let gt = index(gt_dir)?;
    let missing_gt: Vec<&String> = gen.keys().filter(|k| !gt.contains_key(*k)).collect();
    let missing_gen: Vec<&String> = gt.keys().filter(|k| !gen.contains_key(*k)).collect();
    if !missing_gt.is_empty() || !missing_gen.is_empty() {
        let mut msg = String::from("unmatched files");
        if !missing_gt.is_empty() {
            msg += &format!("; no ground truth for: {}", join(&missing_gt));
        }
        if !missing_gen.is_empty() {
            msg += &format!("; no generated image for: {}", join(&missing_gen));
        }
        return Err(Error::Metric(msg));
    }
    if gen.is_empty() {
        return Err(Error::Metric(format!("no images in {}", gen_dir.display())));
    }

    let mut skipped = BTreeMap::new();
    let backend = match backends {
        Backends::None => {
            for m in ["lpips", "dists", "fid"] {
                skipped.insert(m.to_string(), "disabled".to_string());
            }
            None
        }
        Backends::Stub => Some(FeatureBackend::stub(0)?),
        Backends::Spec(spec) => match FeatureBackend::from_spec(spec) {
            Ok(b) => Some(b),
            Err(e @ Error::MissingWeights { .. }) => {
                log::warn!("{e}; perceptual metrics skipped");
                for m in ["lpips", "dists", "fid"] {
                    skipped.insert(m.to_string(), e.to_string());
                }
                None
            }
            Err(e) => return Err(e),
        },
    };

    let mut rows = Vec::with_capacity(gen.len());
    let mut gen_emb = Vec::new();
    let mut gt_emb = Vec::new();
    for (id, gpath) in &gen {
        let g = load_target(gpath)?;
        let t = load_target(&gt[id])?;
        let (lp, di) = match &backend {
            Some(b) => {
                gen_emb.push(b.embed(&g)?);
                gt_emb.push(b.embed(&t)?);
                (Some(lpips(&g, &t, b)?), Some(dists(&g, &t, b)?))
            }
            None => (None, None),
        };
        rows.push((
            id.clone(),
            MetricRow {
                psnr: psnr(&g, &t)?,
                ssim: ssim_metric(&g, &t)?,
                rmse: rmse(&g, &t)?,
                std: pixel_std(&g, &t)?,
                lpips: lp,
                dists: di,
            },
        ));
    }
    let fid_value = match &backend {
        Some(_) if rows.len() >= 2 => Some(fid(&GaussianStats::fit(&gen_emb)?, &GaussianStats::fit(&gt_emb)?)?),
        Some(_) => {
            skipped.insert("fid".into(), "needs at least 2 images per corpus".into());
            None
        }
        None => None,
    };
    Ok(MetricReport {
        rows,
        fid: fid_value,
        backend: backend.map(|b| b.name().to_string()),
        skipped,
    })
}

fn join(v: &[&String]) -> String {
    v.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::seeded_rng;
    use proptest::prelude::*;
    use rand::Rng;

    fn noise_img(seed: u64, side: usize) -> Image {
        let mut rng = seeded_rng(seed, 5);
        Image::new(1, side, side, (0..side * side).map(|_| rng.random::<f32>()).collect())
    }

    #[test]
    fn pixel_metric_closed_forms() {
        let gt = Image::new(1, 16, 16, vec![0.5; 256]);
        let gen = Image::new(1, 16, 16, vec![0.6; 256]);
        assert_eq!(psnr(&gt, &gt).unwrap(), PSNR_IDENTICAL);
        assert!((psnr(&gen, &gt).unwrap() - 20.0).abs() < 1e-5);
        assert!((rmse(&gen, &gt).unwrap() - 25.5).abs() < 1e-4);
        assert_eq!(rmse(&gt, &gt).unwrap(), 0.0);
        assert_eq!(pixel_std(&gt, &gt).unwrap(), 0.0);
        let checker: Vec<f32> = (0..256).map(|i| if (i / 16 + i % 16) % 2 == 0 { 0.6 } else { 0.4 }).collect();
        let std = pixel_std(&Image::new(1, 16, 16, checker), &gt).unwrap();
        assert!((std - 25.5).abs() < 1e-4, "{std}");
        assert!(psnr(&gt, &Image::zeros(1, 8, 8)).is_err());
    }

    #[test]
    fn ssim_metric_is_the_loss_implementation() {
        let a = noise_img(1, 24);
        let b = noise_img(2, 24);
        assert!((ssim_metric(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let direct = scalar(
            &ssim(
                &a.to_tensor(DType::F64).unwrap(),
                &b.to_tensor(DType::F64).unwrap(),
                &SsimParams::default(),
            )
            .unwrap(),
        )
        .unwrap();
        assert_eq!(ssim_metric(&a, &b).unwrap().to_bits(), direct.to_bits());
    }

    #[test]
    fn frechet_one_dimensional_closed_form() {
        let d = frechet_distance(
            &DVector::from_element(1, 0.0),
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::from_element(1, 1.0),
            &DMatrix::from_element(1, 1, 4.0),
        )
        .unwrap();
        assert!((d - 2.0).abs() < 1e-9, "{d}");
    }

    #[test]
    fn fid_identity_and_symmetry() {
        let mut rng = seeded_rng(3, 0);
        let a: Vec<Vec<f64>> = (0..20).map(|_| (0..6).map(|_| rng.random::<f64>()).collect()).collect();
        let b: Vec<Vec<f64>> = (0..20).map(|_| (0..6).map(|_| rng.random::<f64>() * 2.0).collect()).collect();
        let (sa, sb) = (GaussianStats::fit(&a).unwrap(), GaussianStats::fit(&b).unwrap());
        assert!(fid(&sa, &sa).unwrap().abs() < 1e-6);
        let ab = fid(&sa, &sb).unwrap();
        assert!((ab - fid(&sb, &sa).unwrap()).abs() < 1e-6);
        assert!(ab > 0.0);
        let mut rev = a.clone();
        rev.reverse();
        assert!((fid(&GaussianStats::fit(&rev).unwrap(), &sb).unwrap() - ab).abs() < 1e-9);

        // Fewer samples than dimensions: singular covariances.
        let few = GaussianStats::fit(&a[..3]).unwrap();
        assert!(fid(&few, &few).unwrap().abs() < 1e-6);
        assert!(GaussianStats::fit(&a[..1]).is_err());
    }

    #[test]
    fn perceptual_metrics_zero_at_identity_and_monotone() {
        let b = FeatureBackend::stub(0).unwrap();
        let gt = noise_img(9, 32);
        assert!(lpips(&gt, &gt, &b).unwrap().abs() < 1e-6);
        assert!(dists(&gt, &gt, &b).unwrap().abs() < 1e-6);
        assert_eq!(b.embed(&gt).unwrap().len(), 64);
    }

    #[test]
    fn report_formats() {
        let row = MetricRow {
            psnr: f64::INFINITY,
            ssim: 1.0,
            rmse: 0.0,
            std: 0.0,
            lpips: None,
            dists: Some(0.25),
        };
        let r = MetricReport {
            rows: vec![("a".into(), row), ("b".into(), MetricRow { psnr: 30.0, ..row })],
            fid: None,
            backend: None,
            skipped: BTreeMap::new(),
        };
        let csv = r.to_csv();
        assert!(csv.starts_with("id,psnr,ssim,rmse,std,lpips,dists\n"));
        assert!(csv.contains("a,inf,1,0,0,,0.25\n"));
        let js = r.to_json();
        assert_eq!(js["fid"], Value::Null);
        assert_eq!(js["rows"][0]["lpips"], Value::Null);
        assert_eq!(js["aggregates"]["psnr"]["mean"], json!("inf"));
        assert_eq!(js["directions"]["psnr"], json!("higher-better"));
        assert_eq!(js["directions"]["std"], json!("lower-better"));
        assert!(r.table().contains("PSNR ↑"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn psnr_rmse_consistency(seed in 0u64..100_000) {
            let a = noise_img(seed, 16);
            let b = noise_img(seed + 1, 16);
            let p = psnr(&a, &b).unwrap();
            let r = rmse(&a, &b).unwrap();
            prop_assert!((p - 20.0 * (255.0 / r).log10()).abs() < 1e-6);
        }
    }
}
