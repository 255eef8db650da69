//! Adversarial, structural-similarity and feature-matching objectives.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the feature-matching term.
    pub feature_matching: f64,
    /// Weight of the SSIM term.
    pub ssim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            feature_matching: 10.0,
            ssim: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum GanMode {
    /// Binary cross-entropy on logits; non-saturating for the generator.
    #[default]
    Bce,
    /// Least squares against targets 1 (real) and 0 (fake).
    Lsgan,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Discriminator,
    Generator,
}

/// Logit clamp; `softplus(±LOGIT_CLAMP)` is already exact in f32.
const LOGIT_CLAMP: f64 = 100.0;

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let x = x.clamp(-LOGIT_CLAMP, LOGIT_CLAMP)?;
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

/// Adversarial loss averaged over patches and batch.
///
/// Discriminator role: mean of the real term `-ln σ(real)` and the fake term `-ln(1 - σ(fake))`.
/// Generator role: `-ln σ(fake)`; `real` is ignored.
pub fn gan_loss(real: Option<&Tensor>, fake: &Tensor, role: Role, mode: GanMode) -> Result<Tensor> {
    match role {
        Role::Generator => Ok(match mode {
            GanMode::Bce => softplus(&fake.neg()?)?.mean_all()?,
            GanMode::Lsgan => (fake - 1.0)?.sqr()?.mean_all()?,
        }),
        Role::Discriminator => {
            let real = real.ok_or_else(|| {
                Error::Spec("discriminator loss needs real scores".into())
            })?;
            let (r, f) = match mode {
                GanMode::Bce => (
                    softplus(&real.neg()?)?.mean_all()?,
                    softplus(fake)?.mean_all()?,
                ),
                GanMode::Lsgan => ((real - 1.0)?.sqr()?.mean_all()?, fake.sqr()?.mean_all()?),
            };
            Ok(((r + f)? * 0.5)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    /// Dynamic range of the inputs.
    pub range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            range: 1.0,
        }
    }
}

impl SsimParams {
    pub fn c1(&self) -> f64 {
        (self.k1 * self.range).powi(2)
    }

    pub fn c2(&self) -> f64 {
        (self.k2 * self.range).powi(2)
    }

    /// Normalized 2-D Gaussian window, row-major `window x window`.
    pub fn gaussian_window(&self) -> Vec<f64> {
        let n = self.window;
        let center = (n as f64 - 1.0) / 2.0;
        let g: Vec<f64> = (0..n)
            .map(|i| (-(i as f64 - center).powi(2) / (2.0 * self.sigma * self.sigma)).exp())
            .collect();
        let mut w: Vec<f64> = (0..n * n).map(|k| g[k / n] * g[k % n]).collect();
        let sum: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= sum);
        w
    }
}

/// Per-pixel SSIM over valid window positions, `N*C x 1 x (H-w+1) x (W-w+1)`.
pub fn ssim_map(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<Tensor> {
    if x.dims() != y.dims() {
        return Err(Error::Shape(format!(
            "ssim inputs differ: {:?} vs {:?}",
            x.dims(),
            y.dims()
        )));
    }
    let (b, c, h, w) = x.dims4()?;
    let win = params.window;
    if win > h || win > w {
        return Err(Error::Shape(format!(
            "ssim window {win} is larger than the {h}x{w} image"
        )));
    }
    let dtype = x.dtype();
    let kernel = Tensor::from_vec(params.gaussian_window(), (1, 1, win, win), x.device())?
        .to_dtype(dtype)?;
    let x = x.reshape((b * c, 1, h, w))?;
    let y = y.reshape((b * c, 1, h, w))?;
    let blur = |t: &Tensor| crate::conv::conv2d(t, &kernel, 1, 0);
    let mu_x = blur(&x)?;
    let mu_y = blur(&y)?;
    let mu_xx = mu_x.sqr()?;
    let mu_yy = mu_y.sqr()?;
    let mu_xy = (&mu_x * &mu_y)?;
    let var_x = (blur(&x.sqr()?)? - &mu_xx)?;
    let var_y = (blur(&y.sqr()?)? - &mu_yy)?;
    let cov = (blur(&(&x * &y)?)? - &mu_xy)?;
    let (c1, c2) = (params.c1(), params.c2());
    let num = ((mu_xy * 2.0)? + c1)?.mul(&((cov * 2.0)? + c2)?)?;
    let den = ((mu_xx + mu_yy)? + c1)?.mul(&((var_x + var_y)? + c2)?)?;
    Ok(num.div(&den)?)
}

/// Mean SSIM as a scalar tensor.
pub fn ssim(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<Tensor> {
    Ok(ssim_map(x, y, params)?.mean_all()?)
}

/// `1 - SSIM(target, generated)`, in `[0, 2]`.
pub fn ssim_loss(target: &Tensor, generated: &Tensor, params: &SsimParams) -> Result<Tensor> {
    Ok(ssim(target, generated, params)?.affine(-1.0, 1.0)?)
}

/// `Σ_k Σ_i ‖D_k⁽ⁱ⁾(real) − D_k⁽ⁱ⁾(fake)‖₁ / N_i`; real activations are detached.
pub fn feature_matching_loss(real: &[Vec<Tensor>], fake: &[Vec<Tensor>]) -> Result<Tensor> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::Shape(format!(
            "feature matching over {} real and {} fake discriminators",
            real.len(),
            fake.len()
        )));
    }
    let mut total: Option<Tensor> = None;
    for (k, (r, f)) in real.iter().zip(fake).enumerate() {
        if r.len() != f.len() {
            return Err(Error::Shape(format!(
                "discriminator {k}: {} real vs {} fake layers",
                r.len(),
                f.len()
            )));
        }
        for (i, (rl, fl)) in r.iter().zip(f).enumerate() {
            if rl.dims() != fl.dims() {
                return Err(Error::Shape(format!(
                    "discriminator {k} layer {i}: {:?} vs {:?}",
                    rl.dims(),
                    fl.dims()
                )));
            }
            let term = (rl.detach() - fl)?.abs()?.mean_all()?;
            total = Some(match total {
                Some(t) => (t + term)?,
                None => term,
            });
        }
    }
    total.ok_or_else(|| Error::Shape("no feature layers".into()))
}

/// Scalar values of one generator objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LossBreakdown {
    /// Adversarial term summed over the scales.
    pub gan: f64,
    pub feature_matching: f64,
    pub ssim: f64,
    pub total: f64,
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `Σ_k L_GAN,k + λ_fm · L_FM + λ_ssim · L_SSIM`. Fails naming the first non-finite component.
pub fn total_generator_loss(
    gan_terms: &[Tensor],
    fm: &Tensor,
    ssim_term: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let mut gan: Option<Tensor> = None;
    for t in gan_terms {
        gan = Some(match gan {
            Some(g) => (g + t)?,
            None => t.clone(),
        });
    }
    let gan = gan.ok_or_else(|| Error::Spec("no adversarial terms".into()))?;
    let (g, f, s) = (scalar(&gan)?, scalar(fm)?, scalar(ssim_term)?);
    for (name, v) in [("L_GAN", g), ("L_FM", f), ("L_SSIM", s)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
    }
    let total = ((gan + (fm * weights.feature_matching)?)? + (ssim_term * weights.ssim)?)?;
    let breakdown = LossBreakdown {
        gan: g,
        feature_matching: f,
        ssim: s,
        total: g + weights.feature_matching * f + weights.ssim * s,
    };
    Ok((total, breakdown))
}
