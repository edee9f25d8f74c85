//! Tensor plumbing on top of candle: fast convolution, parameters,
//! optimizer and checkpoint containers.

mod adam;
pub mod gradcheck;
pub mod blob;
mod conv;
mod params;

pub use adam::Adam;
pub use conv::conv2d;
pub use params::{Init, ParamStore};

use candle_core::{DType, Device, Tensor};

use crate::error::Result;

/// Population standard deviations get this added to the variance.
pub const STD_EPS: f64 = 1e-5;

/// 3x3 (or 1x1) convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// Registers a He-initialized convolution under `name.weight` / `name.bias`.
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        gain: f64,
    ) -> Result<Self> {
        let (dtype, device) = (store.dtype(), store.device().clone());
        let w = init.conv_weight(cout, cin, k, gain, dtype, &device)?;
        let weight = store.insert(format!("{name}.weight"), w)?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros(cout, dtype, &device)?)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: k / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        conv2d(x, &self.weight, Some(&self.bias), self.stride, self.padding)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    if slope == 0.0 {
        return Ok(x.relu()?);
    }
    Ok(x.maximum(&(x * slope)?)?)
}

/// Logistic sigmoid written through `tanh` so it stays stable for large inputs.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? + 1.0)?.affine(0.5, 0.0)?)
}

/// Nearest-neighbour 2x upsampling of `(B, C, H, W)`.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let y = x
        .reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, 2, w, 2))?
        .contiguous()?;
    Ok(y.reshape((b, c, 2 * h, 2 * w))?)
}

/// Per-sample, per-channel spatial mean and `sqrt(var + STD_EPS)` of a
/// `(B, C, h, w)` tensor, both shaped `(B, C, 1, 1)`.
pub fn channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let mean = x.mean_keepdim((2, 3))?;
    let var = x.broadcast_sub(&mean)?.sqr()?.mean_keepdim((2, 3))?;
    let std = (var + STD_EPS)?.sqrt()?;
    Ok((mean, std))
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn tensor_from_f64(values: Vec<f64>, dims: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
    Ok(Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn upsample_repeats_pixels() {
        let x = Tensor::new(&[[[[1f32, 2.], [3., 4.]]]], &Device::Cpu).unwrap();
        let y = upsample2x(&x).unwrap();
        assert_eq!(
            y.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![1., 1., 2., 2., 1., 1., 2., 2., 3., 3., 4., 4., 3., 3., 4., 4.]
        );
    }

    #[test]
    fn sigmoid_is_logistic() {
        let x = Tensor::new(&[-30f64, -1.0, 0.0, 2.5, 40.0], &Device::Cpu).unwrap();
        let y = sigmoid(&x).unwrap().to_vec1::<f64>().unwrap();
        for (v, xi) in y.iter().zip([-30f64, -1.0, 0.0, 2.5, 40.0]) {
            assert!((v - 1.0 / (1.0 + (-xi).exp())).abs() < 1e-12);
        }
    }
}
