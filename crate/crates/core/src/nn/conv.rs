//! 2-D convolution lowered to im2col + matrix multiplication.
//!
//! Inputs are gathered channels-last into a `(B*OH*OW, k*k*C)` matrix so
//! every product has the long pixel axis as its row dimension.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_len(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input index of output position `o` under tap `kk`, if inside `0..n`.
    fn source(&self, o: usize, kk: usize, n: usize) -> Option<usize> {
        (o * self.stride + kk).checked_sub(self.pad).filter(|&i| i < n)
    }
}

/// `src` is `(B, H, W, C)`; returns `(B*OH*OW, k*k*C)` rows ordered `(ky, kx, c)`.
fn im2col<T: Copy + Default>(src: &[T], (b, h, w, c): (usize, usize, usize, usize), g: Geometry) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let kc = g.k * g.k * c;
    let mut out = vec![T::default(); b * oh * ow * kc];
    for bi in 0..b {
        for oy in 0..oh {
            for ky in 0..g.k {
                let Some(iy) = g.source(oy, ky, h) else { continue };
                let line = &src[((bi * h + iy) * w) * c..((bi * h + iy + 1) * w) * c];
                for ox in 0..ow {
                    let row = &mut out[((bi * oh + oy) * ow + ox) * kc..((bi * oh + oy) * ow + ox + 1) * kc];
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, w) else { continue };
                        let d = (ky * g.k + kx) * c;
                        row[d..d + c].copy_from_slice(&line[ix * c..(ix + 1) * c]);
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: accumulates columns back into `(B, H, W, C)`.
fn col2im<T: Copy + Default + std::ops::AddAssign>(
    src: &[T],
    (b, h, w, c): (usize, usize, usize, usize),
    g: Geometry,
) -> Vec<T> {
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let kc = g.k * g.k * c;
    let mut out = vec![T::default(); b * h * w * c];
    for bi in 0..b {
        for oy in 0..oh {
            for ky in 0..g.k {
                let Some(iy) = g.source(oy, ky, h) else { continue };
                let line = &mut out[((bi * h + iy) * w) * c..((bi * h + iy + 1) * w) * c];
                for ox in 0..ow {
                    let row = &src[((bi * oh + oy) * ow + ox) * kc..((bi * oh + oy) * ow + ox + 1) * kc];
                    for kx in 0..g.k {
                        let Some(ix) = g.source(ox, kx, w) else { continue };
                        let d = (ky * g.k + kx) * c;
                        for (o, v) in line[ix * c..(ix + 1) * c].iter_mut().zip(&row[d..d + c]) {
                            *o += *v;
                        }
                    }
                }
            }
        }
    }
    out
}

fn contiguous_slice<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("im2col/col2im expect a contiguous input"),
    }
}

struct Im2Col(Geometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = layout.shape().dims4()?;
        let g = self.0;
        let (b, h, w, c) = dims;
        let shape = Shape::from((b * g.out_len(h) * g.out_len(w), g.k * g.k * c));
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous_slice(v, layout)?, dims, g)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous_slice(v, layout)?, dims, g)),
            _ => candle_core::bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let op = Col2Im { geometry: self.0, dims };
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

struct Col2Im {
    geometry: Geometry,
    /// `(B, H, W, C)` of the image side.
    dims: (usize, usize, usize, usize),
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (dims, g) = (self.dims, self.geometry);
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous_slice(v, layout)?, dims, g)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous_slice(v, layout)?, dims, g)),
            _ => candle_core::bail!("col2im supports f32 and f64 only"),
        };
        Ok((out, Shape::from(dims)))
    }
}

/// Zero-padded square-kernel convolution of `(B, Cin, H, W)` by `(Cout, Cin, k, k)`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, cin, h, w) = x.dims4()?;
    let (cout, wcin, kh, kw) = weight.dims4()?;
    if wcin != cin || kh != kw {
        return Err(Error::shape(format!(
            "conv weight {:?} does not fit input with {cin} channels",
            weight.dims()
        )));
    }
    let g = Geometry { k: kh, stride, pad };
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(Error::shape(format!("input {h}x{w} smaller than kernel {kh}")));
    }
    let (oh, ow) = (g.out_len(h), g.out_len(w));
    let nhwc = x.permute((0, 2, 3, 1))?.contiguous()?;
    let cols = if kh == 1 && stride == 1 && pad == 0 {
        nhwc.reshape((b * h * w, cin))?
    } else {
        nhwc.apply_op1(Im2Col(g))?
    };
    let wt = weight.permute((2, 3, 1, 0))?.contiguous()?.reshape((kh * kw * cin, cout))?;
    let mut y = cols.matmul(&wt)?;
    if let Some(bias) = bias {
        y = y.broadcast_add(&bias.reshape((1, cout))?)?;
    }
    Ok(y.reshape((b, oh, ow, cout))?.permute((0, 3, 1, 2))?.contiguous()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn naive(x: &[f64], (b, c, h, w): (usize, usize, usize, usize), wt: &[f64], cout: usize, k: usize, s: usize, p: usize) -> Vec<f64> {
        let g = Geometry { k, stride: s, pad: p };
        let (oh, ow) = (g.out_len(h), g.out_len(w));
        let mut out = vec![0.0; b * cout * oh * ow];
        for bi in 0..b {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * s + ky) as isize - p as isize;
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += x[((bi * c + ci) * h + iy as usize) * w + ix as usize]
                                            * wt[((co * c + ci) * k + ky) * k + kx];
                                    }
                                }
                            }
                        }
                        out[((bi * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_convolution() {
        let dev = Device::Cpu;
        for (k, s, p, h) in [(3, 1, 1, 7), (3, 2, 1, 8), (1, 1, 0, 5), (3, 2, 1, 1)] {
            let dims = (2, 3, h, h + 1);
            let n = 2 * 3 * h * (h + 1);
            let xv: Vec<f64> = (0..n).map(|i| ((i * 37 % 23) as f64 - 11.0) / 7.0).collect();
            let wv: Vec<f64> = (0..4 * 3 * k * k).map(|i| ((i * 13 % 17) as f64 - 8.0) / 9.0).collect();
            let x = Tensor::from_vec(xv.clone(), dims, &dev).unwrap();
            let wt = Tensor::from_vec(wv.clone(), (4, 3, k, k), &dev).unwrap();
            let y = conv2d(&x, &wt, None, s, p).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let e = naive(&xv, dims, &wv, 4, k, s, p);
            assert_eq!(y.len(), e.len());
            for (a, b) in y.iter().zip(&e) {
                assert!((a - b).abs() < 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::randn(0f64, 1.0, (1, 2, 5, 4), &dev).unwrap();
        let w = Tensor::randn(0f64, 1.0, (3, 2, 3, 3), &dev).unwrap();
        let loss = |x: &Tensor| conv2d(x, &w, None, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss(x.as_tensor()).backward().unwrap();
        let g = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let base = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for i in [0, 7, 19, 33] {
            let mut plus = base.clone();
            plus[i] += 1e-5;
            let mut minus = base.clone();
            minus[i] -= 1e-5;
            let f = |v: Vec<f64>| loss(&Tensor::from_vec(v, (1, 2, 5, 4), &dev).unwrap()).to_scalar::<f64>().unwrap();
            let fd = (f(plus) - f(minus)) / 2e-5;
            assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", g[i]);
        }
        assert_eq!(x.dtype(), DType::F64);
    }
}
