//! Central finite-difference checks of autograd gradients.

use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradSample {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let t = var.as_tensor();
    let mut v = super::to_f64_vec(t)?;
    v[index] = value;
    let new = Tensor::from_vec(v, t.dims(), t.device())?.to_dtype(t.dtype())?;
    var.set(&new)?;
    Ok(())
}

fn element(var: &Var, index: usize) -> Result<f64> {
    Ok(super::to_f64_vec(var.as_tensor())?[index])
}

/// Compares backprop against `(L(w+h) - L(w-h)) / 2h` for `count` randomly
/// chosen scalars across the parameters of `store` whose names pass `filter`.
/// `loss` must rebuild the graph from the current parameter values.
pub fn check_gradients(
    store: &ParamStore,
    filter: impl Fn(&str) -> bool,
    count: usize,
    step: f64,
    seed: u64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<Vec<GradSample>> {
    let names: Vec<(String, Var)> = store
        .iter()
        .filter(|(n, _)| filter(n))
        .map(|(n, v)| (n.clone(), v.clone()))
        .collect();
    let total: usize = names.iter().map(|(_, v)| v.elem_count()).sum();
    if total == 0 {
        return Err(Error::param("no parameters selected for the gradient check"));
    }
    let grads = loss()?.backward()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut flat = rng.gen_range(0..total);
        let (name, var) = names
            .iter()
            .find(|(_, v)| {
                if flat < v.elem_count() {
                    true
                } else {
                    flat -= v.elem_count();
                    false
                }
            })
            .expect("index within total");
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => super::to_f64_vec(g)?[flat],
            None => 0.0,
        };
        let orig = element(var, flat)?;
        set_element(var, flat, orig + step)?;
        let up = super::scalar(&loss()?)?;
        set_element(var, flat, orig - step)?;
        let down = super::scalar(&loss()?)?;
        set_element(var, flat, orig)?;
        out.push(GradSample {
            param: name.clone(),
            index: flat,
            analytic,
            numeric: (up - down) / (2.0 * step),
        });
    }
    Ok(out)
}
