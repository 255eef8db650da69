//! Named, seeded parameter storage shared by every network in the crate.

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::blob::BlobTensor;
use crate::error::{Error, Result};

/// Derives an independent RNG stream for one network from a run seed.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Ordered collection of trainable variables, addressed by dotted names.
#[derive(Debug, Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: String, var: Var) -> Result<Tensor> {
        if self.index.contains_key(&name) {
            return Err(Error::Spec(format!("parameter `{name}` registered twice")));
        }
        let t = var.as_tensor().clone();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, var));
        Ok(t)
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn to_blob(&self) -> Result<Vec<BlobTensor>> {
        self.entries
            .iter()
            .map(|(name, var)| tensor_to_blob(name, var.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`. Names and shapes must match exactly.
    pub fn load_blob(&self, tensors: &[BlobTensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, blob holds {}",
                self.entries.len(),
                tensors.len()
            )));
        }
        for t in tensors {
            let var = self
                .get(&t.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{}`", t.name)))?;
            if var.dims() != t.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    var.dims()
                )));
            }
            let value = Tensor::from_vec(t.data.clone(), t.shape.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&value)?;
        }
        Ok(())
    }

    pub fn builder<'a>(&'a mut self, rng: &'a mut ChaCha8Rng) -> ParamBuilder<'a> {
        ParamBuilder {
            store: self,
            rng,
            prefix: String::new(),
        }
    }
}

pub(crate) fn tensor_to_blob(name: &str, t: &Tensor) -> Result<BlobTensor> {
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Ok(BlobTensor::new(name, t.dims().to_vec(), data))
}

/// Registers parameters under a name prefix while drawing initial values from one RNG.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl ParamBuilder<'_> {
    pub fn scope(&mut self, name: impl AsRef<str>) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.as_ref().to_string()
        } else {
            format!("{}.{}", self.prefix, name.as_ref())
        };
        ParamBuilder {
            store: &mut *self.store,
            rng: &mut *self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).map_err(|e| Error::Spec(e.to_string()))?;
        let values: Vec<f64> = (0..n).map(|_| dist.sample(&mut *self.rng)).collect();
        let t = Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?;
        let full = self.full_name(name);
        self.store.insert(full, Var::from_tensor(&t)?)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let t = (Tensor::ones(shape, self.store.dtype, &self.store.device)? * value)?;
        let full = self.full_name(name);
        self.store.insert(full, Var::from_tensor(&t)?)
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}
