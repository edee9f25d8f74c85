//! Frozen multi-scale feature extraction and facial-component regions.

mod encoder;
mod roi;

pub use encoder::{extract_features, Encoder, EncoderConfig};
pub use roi::{component_roi, component_rois, reverse_roi_align, reverse_roi_align_partial, roi_align, RoiBox};

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;

use crate::error::{Error, Result};

/// Number of feature scales (and DFT blocks in the full model).
pub const NUM_SCALES: usize = 4;

/// Facial components with a dictionary, in paste order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    LeftEye,
    RightEye,
    Nose,
    Mouth,
}

impl Component {
    pub const ALL: [Component; 4] = [Component::LeftEye, Component::RightEye, Component::Nose, Component::Mouth];

    pub fn name(self) -> &'static str {
        match self {
            Component::LeftEye => "left_eye",
            Component::RightEye => "right_eye",
            Component::Nose => "nose",
            Component::Mouth => "mouth",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::param(format!("unknown component {s}")))
    }
}

/// Side length of the square crop per component at scale 1; halved (rounding
/// up) at every following scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ComponentSizes {
    pub scale1: [usize; 4],
}

impl ComponentSizes {
    /// Crop sizes for 256x256 faces: eyes 40, nose 25, mouth 55.
    pub const FACE_256: ComponentSizes = ComponentSizes { scale1: [40, 40, 25, 55] };

    /// The 256x256 sizes rescaled proportionally (rounded up) to `resolution`.
    pub fn for_resolution(resolution: usize) -> Self {
        if resolution == 256 {
            return Self::FACE_256;
        }
        let scale1 = Self::FACE_256
            .scale1
            .map(|s| ((s * resolution) as f64 / 256.0).ceil().max(1.0) as usize);
        Self { scale1 }
    }

    pub fn size(&self, component: Component, scale: usize) -> usize {
        let mut s = self.scale1[component.index()];
        for _ in 1..scale {
            s = s.div_ceil(2);
        }
        s
    }
}

/// Encoder output at one scale: `(B, C_s, H_s, W_s)` with `H_s = H / 2^(s-1)`.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub scale: usize,
    pub data: Tensor,
}

impl FeatureMap {
    pub fn new(scale: usize, data: Tensor) -> Result<Self> {
        check_scale(scale)?;
        data.dims4()?;
        Ok(Self { scale, data })
    }

    /// Pixels per feature cell.
    pub fn stride(&self) -> usize {
        1 << (self.scale - 1)
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("feature maps are rank 4")
    }
}

/// Fixed-size crop of one component: `(B, C_s, h, w)`.
#[derive(Debug, Clone)]
pub struct ComponentFeature {
    pub component: Component,
    pub scale: usize,
    pub data: Tensor,
}

impl ComponentFeature {
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("component features are rank 4")
    }
}

pub(crate) fn check_scale(scale: usize) -> Result<()> {
    if (1..=NUM_SCALES).contains(&scale) {
        Ok(())
    } else {
        Err(Error::param(format!("scale {scale} outside 1..={NUM_SCALES}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crop_sizes_halve_with_ceiling() {
        let s = ComponentSizes::FACE_256;
        let eyes: Vec<_> = (1..=4).map(|k| s.size(Component::LeftEye, k)).collect();
        let nose: Vec<_> = (1..=4).map(|k| s.size(Component::Nose, k)).collect();
        let mouth: Vec<_> = (1..=4).map(|k| s.size(Component::Mouth, k)).collect();
        assert_eq!(eyes, [40, 20, 10, 5]);
        assert_eq!(nose, [25, 13, 7, 4]);
        assert_eq!(mouth, [55, 28, 14, 7]);
    }

    #[test]
    fn smaller_resolutions_scale_proportionally() {
        assert_eq!(ComponentSizes::for_resolution(128).scale1, [20, 20, 13, 28]);
        assert_eq!(ComponentSizes::for_resolution(64).scale1, [10, 10, 7, 14]);
    }

    #[test]
    fn component_names_round_trip() {
        for c in Component::ALL {
            assert_eq!(c.name().parse::<Component>().unwrap(), c);
        }
    }
}
