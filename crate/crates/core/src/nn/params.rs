use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Named trainable tensors. Layers keep clones of the tensors handed out
/// here; updates through [`Var::set`] are visible to every clone.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<Tensor> {
        let name = name.into();
        if self.vars.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let var = Var::from_tensor(&value.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.vars.insert(name, var);
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn named_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        self.vars
            .iter()
            .map(|(k, v)| (format!("{prefix}{k}"), v.as_detached_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `source` (keys prefixed with `prefix`).
    pub fn load(&self, source: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        for (name, var) in &self.vars {
            let key = format!("{prefix}{name}");
            let t = source
                .get(&key)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {key}")))?;
            if t.dims() != var.dims() {
                return Err(Error::Validation(format!(
                    "parameter {key} has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.abs()?.sum_all()?.to_scalar::<f64>()?;
            if !s.is_finite() {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Seeded weight initializer; all draws come from one ChaCha stream.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, dims: &[usize], std: f64, dtype: DType, device: &Device) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        let dist = Normal::new(0.0, std).map_err(|e| Error::param(e.to_string()))?;
        let v: Vec<f64> = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Ok(Tensor::from_vec(v, dims, device)?.to_dtype(dtype)?)
    }

    /// He-normal for a `(Cout, Cin, k, k)` convolution, scaled by `gain`.
    pub fn conv_weight(&mut self, cout: usize, cin: usize, k: usize, gain: f64, dtype: DType, device: &Device) -> Result<Tensor> {
        let fan_in = (cin * k * k) as f64;
        self.normal(&[cout, cin, k, k], gain * (2.0 / fan_in).sqrt(), dtype, device)
    }
}
