//! Power-iteration spectral norm against a dense singular value decomposition
//! done by repeated squaring of W^T W.
use candle_core::{Device, Tensor};
use dfdnet::objectives::spectral_normalize;

fn main() -> dfdnet::Result<()> {
    let dev = Device::Cpu;
    let w = Tensor::randn(0f64, 1.0, (16, 16), &dev)?;
    let u0 = Tensor::randn(0f64, 1.0, (16,), &dev)?;
    // reference: largest eigenvalue of W^T W by many power steps
    let wtw = w.t()?.matmul(&w)?;
    let mut v = Tensor::ones((16, 1), candle_core::DType::F64, &dev)?;
    for _ in 0..5000 {
        v = wtw.matmul(&v)?;
        v = v.broadcast_div(&v.sqr()?.sum_all()?.sqrt()?)?;
    }
    let sigma_ref = w.matmul(&v)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
    for iters in [1, 5, 20, 50, 200] {
        let (wn, _, sigma) = spectral_normalize(&w, &u0, iters)?;
        let after = wn.matmul(&v)?.sqr()?.sum_all()?.sqrt()?.to_scalar::<f64>()?;
        println!("{iters:>4} iterations: sigma {sigma:.6} (ref {sigma_ref:.6}), |W/sigma v1| = {after:.6}");
    }
    Ok(())
}
