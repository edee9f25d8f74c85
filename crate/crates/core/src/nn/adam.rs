use std::collections::BTreeMap;

use candle_core::{backprop::GradStore, Tensor};

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update for every parameter that received a gradient.
    pub fn step(&mut self, params: &ParamStore, grads: &GradStore) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, var) in params.iter() {
            let Some(g) = grads.get(var.as_tensor()) else {
                continue;
            };
            // Gradients can still reference the forward graph; moments chained
            // onto them would keep every step's graph alive.
            let g = &g.detach();
            let m = match self.m.get(name) {
                Some(m) => ((m * self.beta1)? + (g * (1.0 - self.beta1))?)?,
                None => (g * (1.0 - self.beta1))?,
            };
            let v = match self.v.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let denom = ((&v / bc2)?.sqrt()? + self.eps)?;
            let update = ((&m / bc1)? / denom)?;
            var.set(&(var.as_tensor() - (update * self.lr)?)?)?;
            self.m.insert(name.clone(), m);
            self.v.insert(name.clone(), v);
        }
        Ok(())
    }

    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len());
        for (k, t) in &self.m {
            out.push((format!("{prefix}m.{k}"), t.clone()));
        }
        for (k, t) in &self.v {
            out.push((format!("{prefix}v.{k}"), t.clone()));
        }
        out
    }

    pub fn state_text(&self, prefix: &str) -> String {
        format!("{prefix}t={}\n{prefix}lr={:e}\n", self.t, self.lr)
    }

    pub fn restore(&mut self, t: u64, lr: f64, source: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        self.t = t;
        self.lr = lr;
        self.m.clear();
        self.v.clear();
        for (k, v) in source {
            if let Some(name) = k.strip_prefix(&format!("{prefix}m.")) {
                self.m.insert(name.to_string(), v.clone());
            } else if let Some(name) = k.strip_prefix(&format!("{prefix}v.")) {
                self.v.insert(name.to_string(), v.clone());
            }
        }
        if self.m.len() != self.v.len() {
            return Err(Error::Validation("optimizer state has unmatched moments".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn minimizes_a_quadratic() {
        let mut ps = ParamStore::new(DType::F64, Device::Cpu);
        let x = ps.insert("x", Tensor::new(&[3.0f64, -2.0], &Device::Cpu).unwrap()).unwrap();
        let mut opt = Adam::new(0.1, 0.9, 0.999);
        for _ in 0..500 {
            let loss = x.sqr().unwrap().sum_all().unwrap();
            let g = loss.backward().unwrap();
            opt.step(&ps, &g).unwrap();
        }
        let v = x.to_vec1::<f64>().unwrap();
        assert!(v.iter().all(|a| a.abs() < 1e-2), "{v:?}");
    }
}
