//! Fidelity metrics on `[0, 1]` images.

use crate::error::{Error, Result};
use crate::imaging::Image;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// `10 log10(1 / MSE)` over all channels, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (*x as f64 - *y as f64).powi(2))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Rec.601 luma.
pub fn luma(img: &Image) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    (0..r.len())
        .map(|i| 0.299 * r[i] as f64 + 0.587 * g[i] as f64 + 0.114 * b[i] as f64)
        .collect()
}

/// Normalized 1-D Gaussian taps of the SSIM window.
pub fn ssim_taps() -> Vec<f64> {
    let c = (SSIM_WINDOW / 2) as f64;
    let t: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Separable 'valid' filtering of an `h x w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..k).map(|j| taps[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..k).map(|i| taps[i] * rows[(yo + i) * ow + xo]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5)
/// of the Rec.601 luma, with dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let (x, y) = (luma(a), luma(b));
    let taps = ssim_taps();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &taps);
    let my = filter_valid(&y, h, w, &taps);
    let mxx = filter_valid(&prod(&x, &x), h, w, &taps);
    let myy = filter_valid(&prod(&y, &y), h, w, &taps);
    let mxy = filter_valid(&prod(&x, &y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let total: f64 = (0..mx.len())
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / mx.len() as f64)
}

/// Adapter for learned perceptual distances such as LPIPS, which need
/// external network weights and are therefore not built in.
pub trait PerceptualMetric: Send + Sync {
    fn name(&self) -> &str;
    fn distance(&self, a: &Image, b: &Image) -> Result<f64>;
}
