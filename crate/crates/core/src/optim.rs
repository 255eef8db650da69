//! Adam with explicit, serializable moment estimates.

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::blob::BlobTensor;
use crate::error::{Error, Result};
use crate::params::{tensor_to_blob, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2) && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid Adam settings {self:?}")))
        }
    }
}

struct Slot {
    name: String,
    var: Var,
    m: Tensor,
    v: Tensor,
}

pub struct Adam {
    config: AdamConfig,
    slots: Vec<Slot>,
    step: u64,
    lr: f64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Result<Self> {
        config.validate()?;
        let slots = params
            .vars()
            .map(|(name, var)| {
                Ok(Slot {
                    name: name.to_string(),
                    var: var.clone(),
                    m: var.zeros_like()?,
                    v: var.zeros_like()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            slots,
            step: 0,
            lr: 0.0,
        })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// Number of updates applied so far.
    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Learning rate used by the most recent update.
    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// One update at learning rate `lr`; parameters absent from `grads` are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64) -> Result<()> {
        self.step += 1;
        self.lr = lr;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let Some(g) = grads.get(slot.var.as_tensor()) else {
                continue;
            };
            slot.m = ((&slot.m * beta1)? + (g * (1.0 - beta1))?)?;
            slot.v = ((&slot.v * beta2)? + (g.sqr()? * (1.0 - beta2))?)?;
            let m_hat = (&slot.m / bc1)?;
            let v_hat = (&slot.v / bc2)?;
            let update = (m_hat / (v_hat.sqrt()? + eps)?)?;
            let next = (slot.var.as_tensor() - (update * lr)?)?;
            slot.var.set(&next)?;
        }
        Ok(())
    }

    pub fn state_blob(&self) -> Result<Vec<BlobTensor>> {
        let mut out = Vec::with_capacity(self.slots.len() * 2);
        for s in &self.slots {
            out.push(tensor_to_blob(&format!("m.{}", s.name), &s.m)?);
            out.push(tensor_to_blob(&format!("v.{}", s.name), &s.v)?);
        }
        Ok(out)
    }

    /// Restores moments and the update counter saved alongside them.
    pub fn load_state(&mut self, tensors: &[BlobTensor], step: u64, lr: f64) -> Result<()> {
        if tensors.len() != self.slots.len() * 2 {
            return Err(Error::Checkpoint(format!(
                "optimizer state has {} tensors, expected {}",
                tensors.len(),
                self.slots.len() * 2
            )));
        }
        let find = |name: &str| {
            tensors
                .iter()
                .find(|t| t.name == name)
                .ok_or_else(|| Error::Checkpoint(format!("optimizer state lacks `{name}`")))
        };
        for s in &mut self.slots {
            for (key, dst) in [("m", &mut s.m), ("v", &mut s.v)] {
                let bt = find(&format!("{key}.{}", s.name))?;
                if bt.shape != dst.dims() {
                    return Err(Error::Checkpoint(format!(
                        "optimizer `{key}.{}` has shape {:?}, expected {:?}",
                        s.name,
                        bt.shape,
                        dst.dims()
                    )));
                }
                *dst = Tensor::from_slice(&bt.data, bt.shape.as_slice(), dst.device())?
                    .to_dtype(dst.dtype())?;
            }
        }
        self.step = step;
        self.lr = lr;
        Ok(())
    }
}
