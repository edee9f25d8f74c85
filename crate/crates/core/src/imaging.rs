//! RGB images in `[0, 1]` and bicubic resampling.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Planar (channel-major) RGB image with real intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            height,
            width,
            data: vec![value; Self::CHANNELS * height * width],
        }
    }

    pub fn from_planar(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::shape(format!(
                "planar buffer of {} values cannot hold a {height}x{width} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn clip(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let rgb = image::open(path.as_ref())?.to_rgb8();
        Ok(Self::from_rgb8(&rgb))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_rgb8().save(path.as_ref())?;
        Ok(())
    }

    pub fn from_rgb8(rgb: &image::RgbImage) -> Self {
        let (w, h) = rgb.dimensions();
        Self::from_fn(h as usize, w as usize, |c, y, x| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        })
    }

    /// Quantizes to 8 bits per channel with rounding; values are clipped first.
    pub fn to_rgb8(&self) -> image::RgbImage {
        image::RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let px = |c| (self.get(c, y as usize, x as usize).clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// `(1, 3, H, W)` tensor.
    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        let t = Tensor::from_slice(&self.data, (1, Self::CHANNELS, self.height, self.width), device)?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Stacks images of identical size into a `(B, 3, H, W)` tensor.
    pub fn batch_to_tensor(images: &[&Image], dtype: DType, device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot batch zero images"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for img in images {
            if !img.same_shape(first) {
                return Err(Error::shape("images in a batch must share one size"));
            }
            data.extend_from_slice(&img.data);
        }
        let t = Tensor::from_vec(
            data,
            (images.len(), Self::CHANNELS, first.height, first.width),
            device,
        )?;
        Ok(t.to_dtype(dtype)?)
    }

    /// Reads image `index` out of a `(B, 3, H, W)` tensor.
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let (_, c, h, w) = t.dims4()?;
        if c != Self::CHANNELS {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data = t
            .get(index)?
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Self::from_planar(h, w, data)
    }
}

fn cubic(x: f64) -> f64 {
    let a = x.abs();
    if a <= 1.0 {
        (1.5 * a - 2.5) * a * a + 1.0
    } else if a < 2.0 {
        ((-0.5 * a + 2.5) * a - 4.0) * a + 2.0
    } else {
        0.0
    }
}

fn reflect(j: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let mut j = j.rem_euclid(period);
    if j >= n {
        j = period - 1 - j;
    }
    j as usize
}

/// Sparse bicubic resampling weights, one row per output sample.
///
/// Uses the Keys kernel (a = -0.5) with half-pixel centers. When shrinking,
/// the kernel is stretched by the inverse scale so the filter also acts as
/// an antialiasing low-pass. Rows sum to one and borders are reflected.
pub fn bicubic_weights(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    let (kscale, width) = if scale < 1.0 {
        (scale, 4.0 / scale)
    } else {
        (1.0, 4.0)
    };
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) / scale - 0.5;
            let left = (center - width / 2.0).floor() as i64;
            let taps = width.ceil() as i64 + 2;
            let mut row: Vec<(usize, f64)> = Vec::with_capacity(taps as usize);
            let mut total = 0.0;
            for j in left..left + taps {
                let w = kscale * cubic(kscale * (center - j as f64));
                if w == 0.0 {
                    continue;
                }
                total += w;
                let idx = reflect(j, in_len);
                match row.iter_mut().find(|(k, _)| *k == idx) {
                    Some(entry) => entry.1 += w,
                    None => row.push((idx, w)),
                }
            }
            for entry in &mut row {
                entry.1 /= total;
            }
            row
        })
        .collect()
}

/// Dense `(out_len, in_len)` resampling matrix, row-major.
pub fn bicubic_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    for (i, row) in bicubic_weights(in_len, out_len).into_iter().enumerate() {
        for (j, w) in row {
            m[i * in_len + j] += w;
        }
    }
    m
}

fn resample_plane(src: &[f32], h: usize, w: usize, rows: &[Vec<(usize, f64)>], cols: &[Vec<(usize, f64)>]) -> Vec<f32> {
    let oh = rows.len();
    let ow = cols.len();
    // Horizontal pass first, keeping intermediate values in f64.
    let mut tmp = vec![0.0f64; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for (x, taps) in cols.iter().enumerate() {
            tmp[y * ow + x] = taps.iter().map(|&(j, k)| k * line[j] as f64).sum();
        }
    }
    let mut out = vec![0.0f32; oh * ow];
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().map(|&(j, k)| k * tmp[j * ow + x]).sum::<f64>() as f32;
        }
    }
    out
}

/// Bicubic resize; antialiased when shrinking. Output is not clipped.
pub fn resize_bicubic(img: &Image, out_h: usize, out_w: usize) -> Image {
    if out_h == img.height && out_w == img.width {
        return img.clone();
    }
    let rows = bicubic_weights(img.height, out_h);
    let cols = bicubic_weights(img.width, out_w);
    let mut data = Vec::with_capacity(Image::CHANNELS * out_h * out_w);
    for c in 0..Image::CHANNELS {
        data.extend(resample_plane(img.plane(c), img.height, img.width, &rows, &cols));
    }
    Image {
        height: out_h,
        width: out_w,
        data,
    }
}

/// Differentiable bicubic resize of `(B, C, H, W)` tensors as two matrix products.
#[derive(Debug, Clone)]
pub struct TensorResize {
    rows: Tensor,
    cols_t: Tensor,
}

impl TensorResize {
    pub fn new(in_hw: (usize, usize), out_hw: (usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        let rows = Tensor::from_vec(bicubic_matrix(in_hw.0, out_hw.0), (out_hw.0, in_hw.0), device)?
            .to_dtype(dtype)?;
        let cols_t = Tensor::from_vec(bicubic_matrix(in_hw.1, out_hw.1), (out_hw.1, in_hw.1), device)?
            .to_dtype(dtype)?
            .t()?
            .contiguous()?;
        Ok(Self { rows, cols_t })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.rows.broadcast_matmul(x)?;
        Ok(y.broadcast_matmul(&self.cols_t)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weights_sum_to_one() {
        for (n, m) in [(64, 16), (16, 64), (10, 7), (37, 37), (5, 1)] {
            for row in bicubic_weights(n, m) {
                let s: f64 = row.iter().map(|(_, w)| w).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn constant_image_survives_resize() {
        let img = Image::filled(20, 13, 0.37);
        let out = resize_bicubic(&img, 7, 9);
        assert!(out.data().iter().all(|v| (v - 0.37).abs() < 1e-6));
    }

    #[test]
    fn identity_size_is_exact() {
        let img = Image::from_fn(5, 6, |c, y, x| (c + y * 7 + x) as f32 / 40.0);
        assert_eq!(resize_bicubic(&img, 5, 6), img);
    }

    #[test]
    fn tensor_resize_matches_image_resize() {
        let img = Image::from_fn(16, 12, |c, y, x| ((c * 31 + y * 7 + x * 3) % 17) as f32 / 17.0);
        let op = TensorResize::new((16, 12), (5, 4), DType::F64, &Device::Cpu).unwrap();
        let t = op.forward(&img.to_tensor(DType::F64, &Device::Cpu).unwrap()).unwrap();
        let a = Image::from_tensor(&t, 0).unwrap();
        let b = resize_bicubic(&img, 5, 4);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn rgb8_round_trip_is_lossless_on_grid_values() {
        let img = Image::from_fn(4, 4, |c, y, x| ((c + y + x) * 17) as f32 / 255.0);
        let back = Image::from_rgb8(&img.to_rgb8());
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
