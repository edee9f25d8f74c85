//! Component boxes from landmarks, RoIAlign and its paste-back inverse.
//!
//! Coordinates are continuous: pixel (or feature cell) `i` spans `[i, i+1)`
//! and its center sits at `i + 0.5`. A box in pixels maps to scale `s` by
//! dividing by the stride `2^(s-1)`.

use candle_core::Tensor;

use super::{check_scale, Component, ComponentFeature, FeatureMap};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;

/// Axis-aligned component box in pixel coordinates, clamped to the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiBox {
    pub component: Component,
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl RoiBox {
    pub fn new(component: Component, x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let b = Self { component, x0, y0, x1, y1 };
        if !(x1 - x0 > 0.0) || !(y1 - y0 > 0.0) {
            return Err(Error::DegenerateRoi {
                component: component.name(),
                detail: format!("box [{x0}, {x1}] x [{y0}, {y1}] has no area"),
            });
        }
        Ok(b)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// `(x0, y0, x1, y1)` in scale-`s` feature coordinates.
    pub fn feature_box(&self, scale: usize) -> (f64, f64, f64, f64) {
        let stride = (1usize << (scale - 1)) as f64;
        (self.x0 / stride, self.y0 / stride, self.x1 / stride, self.y1 / stride)
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x <= self.x1 && y >= self.y0 && y <= self.y1
    }
}

/// 1-indexed landmark ranges and box margins per component.
fn component_spec(c: Component) -> ((usize, usize), f64) {
    match c {
        Component::LeftEye => ((37, 42), 1.4),
        Component::RightEye => ((43, 48), 1.4),
        Component::Nose => ((28, 36), 1.3),
        Component::Mouth => ((49, 68), 1.2),
    }
}

/// Square box around one component's landmark group: centered on the group
/// mean with half-extent `margin * max distance from the mean`, clamped to
/// the `(height, width)` image.
pub fn component_roi(landmarks: &LandmarkSet, component: Component, image_hw: (usize, usize)) -> Result<RoiBox> {
    let (h, w) = (image_hw.0 as f64, image_hw.1 as f64);
    let ((first, last), margin) = component_spec(component);
    let pts = landmarks.range(first, last);
    let n = pts.len() as f64;
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let radius = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let half = margin * radius;
    RoiBox::new(
        component,
        (cx - half).clamp(0.0, w),
        (cy - half).clamp(0.0, h),
        (cx + half).clamp(0.0, w),
        (cy + half).clamp(0.0, h),
    )
}

/// Boxes for all four components; fails if any of them is degenerate.
pub fn component_rois(landmarks: &LandmarkSet, image_hw: (usize, usize)) -> Result<[RoiBox; 4]> {
    Ok([
        component_roi(landmarks, Component::LeftEye, image_hw)?,
        component_roi(landmarks, Component::RightEye, image_hw)?,
        component_roi(landmarks, Component::Nose, image_hw)?,
        component_roi(landmarks, Component::Mouth, image_hw)?,
    ])
}

/// Clamped linear interpolation position in index space.
fn lerp_index(coord: f64, n: usize) -> (usize, usize, f64) {
    let c = coord.clamp(0.0, (n - 1) as f64);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

/// Per-item 1-D interpolation matrices, stored `(B, 1, rows, cols)` so they
/// broadcast over channels. Bilinear sampling on a grid is separable, so a
/// crop is `R_y @ X @ R_x^T`.
struct Interp {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Interp {
    fn new(b: usize, rows: usize, cols: usize) -> Self {
        Self {
            data: vec![0.0; b * rows * cols],
            rows,
            cols,
        }
    }

    fn set(&mut self, bi: usize, row: usize, (i0, i1, l): (usize, usize, f64)) {
        let base = (bi * self.rows + row) * self.cols;
        self.data[base + i0] += 1.0 - l;
        self.data[base + i1] += l;
    }

    fn tensor(self, b: usize, transpose: bool, like: &Tensor) -> Result<Tensor> {
        let t = Tensor::from_vec(self.data, (b, 1, self.rows, self.cols), like.device())?.to_dtype(like.dtype())?;
        Ok(if transpose { t.transpose(2, 3)?.contiguous()? } else { t })
    }
}

/// Crops every box (one per batch item) from `fm` and resamples it to
/// `out_hw` with one bilinear sample at each bin center.
pub fn roi_align(fm: &FeatureMap, boxes: &[RoiBox], out_hw: (usize, usize)) -> Result<ComponentFeature> {
    check_scale(fm.scale)?;
    let (b, c, h, w) = fm.dims();
    if boxes.len() != b {
        return Err(Error::shape(format!("{} boxes for a batch of {b}", boxes.len())));
    }
    let component = boxes
        .first()
        .ok_or_else(|| Error::shape("empty batch"))?
        .component;
    let (oh, ow) = out_hw;
    if oh == 0 || ow == 0 {
        return Err(Error::param("RoIAlign output size must be positive"));
    }
    let mut ry = Interp::new(b, oh, h);
    let mut rx = Interp::new(b, ow, w);
    for (bi, bx) in boxes.iter().enumerate() {
        if bx.component != component {
            return Err(Error::param("all boxes in a RoIAlign batch must share a component"));
        }
        let (fx0, fy0, fx1, fy1) = bx.feature_box(fm.scale);
        if !(fx1 - fx0 > 0.0) || !(fy1 - fy0 > 0.0) {
            return Err(Error::DegenerateRoi {
                component: component.name(),
                detail: "empty box".into(),
            });
        }
        let (bin_w, bin_h) = ((fx1 - fx0) / ow as f64, (fy1 - fy0) / oh as f64);
        for i in 0..oh {
            ry.set(bi, i, lerp_index(fy0 + (i as f64 + 0.5) * bin_h - 0.5, h));
        }
        for j in 0..ow {
            rx.set(bi, j, lerp_index(fx0 + (j as f64 + 0.5) * bin_w - 0.5, w));
        }
    }
    let ry = ry.tensor(b, false, &fm.data)?;
    let rxt = rx.tensor(b, true, &fm.data)?;
    let out = ry.broadcast_matmul(&fm.data.contiguous()?)?.broadcast_matmul(&rxt)?;
    debug_assert_eq!(out.dims(), &[b, c, oh, ow]);
    Ok(ComponentFeature {
        component,
        scale: fm.scale,
        data: out,
    })
}

/// Pastes `comp` back over its box: every cell whose center lies inside the
/// box takes the bilinear resample of `comp`; all other cells are copied
/// from `fm` untouched.
pub fn reverse_roi_align(fm: &FeatureMap, comp: &ComponentFeature, boxes: &[RoiBox]) -> Result<FeatureMap> {
    let opt: Vec<Option<RoiBox>> = boxes.iter().copied().map(Some).collect();
    reverse_roi_align_partial(fm, comp, &opt)
}

/// As [`reverse_roi_align`], leaving batch items whose box is `None` unchanged.
pub fn reverse_roi_align_partial(fm: &FeatureMap, comp: &ComponentFeature, boxes: &[Option<RoiBox>]) -> Result<FeatureMap> {
    let (b, c, h, w) = fm.dims();
    let (cb, cc, oh, ow) = comp.dims();
    if cb != b || cc != c || boxes.len() != b {
        return Err(Error::shape(format!(
            "component {:?} cannot be pasted into feature map {:?} with {} boxes",
            comp.data.dims(),
            fm.data.dims(),
            boxes.len()
        )));
    }
    if comp.scale != fm.scale {
        return Err(Error::shape(format!("component at scale {} pasted into scale {}", comp.scale, fm.scale)));
    }
    let mut ry = Interp::new(b, h, oh);
    let mut rx = Interp::new(b, w, ow);
    let mut mask = vec![0u8; b * h * w];
    for (bi, bx) in boxes.iter().enumerate() {
        let Some(bx) = bx else { continue };
        let (fx0, fy0, fx1, fy1) = bx.feature_box(fm.scale);
        let (bin_w, bin_h) = ((fx1 - fx0) / ow as f64, (fy1 - fy0) / oh as f64);
        if !(bin_w > 0.0) || !(bin_h > 0.0) {
            continue;
        }
        let inside = |c: f64, lo: f64, hi: f64| c >= lo && c < hi;
        for i in (0..h).filter(|&i| inside(i as f64 + 0.5, fy0, fy1)) {
            ry.set(bi, i, lerp_index((i as f64 + 0.5 - fy0) / bin_h - 0.5, oh));
            for j in (0..w).filter(|&j| inside(j as f64 + 0.5, fx0, fx1)) {
                mask[(bi * h + i) * w + j] = 1;
            }
        }
        for j in (0..w).filter(|&j| inside(j as f64 + 0.5, fx0, fx1)) {
            rx.set(bi, j, lerp_index((j as f64 + 0.5 - fx0) / bin_w - 0.5, ow));
        }
    }
    let ry = ry.tensor(b, false, &fm.data)?;
    let rxt = rx.tensor(b, true, &fm.data)?;
    let pasted = ry.broadcast_matmul(&comp.data.contiguous()?)?.broadcast_matmul(&rxt)?;
    let mask = Tensor::from_vec(mask, (b, 1, h, w), fm.data.device())?.broadcast_as((b, c, h, w))?;
    Ok(FeatureMap {
        scale: fm.scale,
        data: mask.where_cond(&pasted, &fm.data)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn fm(scale: usize, dims: (usize, usize, usize, usize), f: impl Fn(usize) -> f64) -> FeatureMap {
        let n = dims.0 * dims.1 * dims.2 * dims.3;
        let v: Vec<f64> = (0..n).map(f).collect();
        FeatureMap::new(scale, Tensor::from_vec(v, dims, &Device::Cpu).unwrap()).unwrap()
    }

    #[test]
    fn constant_map_gives_constant_crop() {
        let m = fm(2, (1, 3, 8, 8), |_| 2.5);
        let bx = RoiBox::new(Component::Nose, 1.3, 2.7, 11.9, 13.1).unwrap();
        let out = roi_align(&m, &[bx], (5, 4)).unwrap();
        assert!(crate::nn::to_f64_vec(&out.data).unwrap().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn exact_grid_crop_and_round_trip() {
        let m = fm(1, (1, 2, 6, 7), |i| i as f64 * 0.1);
        let bx = RoiBox::new(Component::Mouth, 2.0, 1.0, 5.0, 5.0).unwrap();
        let out = roi_align(&m, &[bx], (4, 3)).unwrap();
        let got = crate::nn::to_f64_vec(&out.data).unwrap();
        let src = crate::nn::to_f64_vec(&m.data).unwrap();
        let mut k = 0;
        for c in 0..2 {
            for y in 1..5 {
                for x in 2..5 {
                    assert_eq!(got[k], src[(c * 6 + y) * 7 + x]);
                    k += 1;
                }
            }
        }
        let back = reverse_roi_align(&m, &out, &[bx]).unwrap();
        assert_eq!(crate::nn::to_f64_vec(&back.data).unwrap(), src);
    }

    #[test]
    fn zero_component_masks_box() {
        let m = fm(1, (1, 1, 6, 6), |_| 3.0);
        let bx = RoiBox::new(Component::LeftEye, 1.0, 2.0, 4.0, 4.0).unwrap();
        let comp = ComponentFeature {
            component: Component::LeftEye,
            scale: 1,
            data: Tensor::zeros((1, 1, 5, 5), DType::F64, &Device::Cpu).unwrap(),
        };
        let out = crate::nn::to_f64_vec(&reverse_roi_align(&m, &comp, &[bx]).unwrap().data).unwrap();
        for y in 0..6 {
            for x in 0..6 {
                let inside = (1..4).contains(&x) && (2..4).contains(&y);
                assert_eq!(out[y * 6 + x], if inside { 0.0 } else { 3.0 });
            }
        }
    }

    #[test]
    fn degenerate_box_is_rejected() {
        assert!(matches!(
            RoiBox::new(Component::Nose, 3.0, 1.0, 3.0, 5.0),
            Err(Error::DegenerateRoi { .. })
        ));
        let pts = vec![(-50.0, -50.0); 68];
        let lm = LandmarkSet::new(pts).unwrap();
        assert!(matches!(component_rois(&lm, (64, 64)), Err(Error::DegenerateRoi { .. })));
    }

    #[test]
    fn scale_consistency() {
        let bx = RoiBox::new(Component::Mouth, 10.0, 20.0, 34.0, 40.0).unwrap();
        for s in 1..4 {
            let a = bx.feature_box(s);
            let b = bx.feature_box(s + 1);
            assert_eq!((a.0 / 2.0, a.1 / 2.0, a.2 / 2.0, a.3 / 2.0), b);
        }
    }

    #[test]
    fn shape_mismatch_on_paste() {
        let m = fm(1, (1, 2, 6, 6), |_| 0.0);
        let bx = RoiBox::new(Component::Nose, 1.0, 1.0, 4.0, 4.0).unwrap();
        let comp = ComponentFeature {
            component: Component::Nose,
            scale: 1,
            data: Tensor::zeros((1, 3, 3, 3), DType::F64, &Device::Cpu).unwrap(),
        };
        assert!(matches!(reverse_roi_align(&m, &comp, &[bx]), Err(Error::Shape(_))));
    }
}
