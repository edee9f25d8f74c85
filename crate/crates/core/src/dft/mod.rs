//! Dictionary feature transfer: component re-normalization, matching,
//! confidence-weighted fusion and the per-scale block composing them.

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};

use crate::dictionary::{ComponentDictionary, DictionarySet};
use crate::error::{Error, Result};
use crate::features::{reverse_roi_align_partial, roi_align, Component, ComponentFeature, FeatureMap, RoiBox};
use crate::nn::{self, channel_stats, Conv2d, Init, ParamStore};

/// Similarity used to pick a cluster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MatchMode {
    /// Raw inner product.
    #[default]
    Inner,
    Cosine,
}

impl fmt::Display for MatchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatchMode::Inner => "inner",
            MatchMode::Cosine => "cosine",
        })
    }
}

impl FromStr for MatchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inner" => Ok(MatchMode::Inner),
            "cosine" => Ok(MatchMode::Cosine),
            _ => Err(Error::Config(format!("match mode must be inner or cosine, got {s}"))),
        }
    }
}

/// Ablation switches shared by every DFT block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DftOptions {
    /// Off: clusters are matched and transferred without re-normalization.
    pub use_cadain: bool,
    /// Off: the matched feature replaces the input component outright.
    pub use_confidence: bool,
    pub match_mode: MatchMode,
}

impl Default for DftOptions {
    fn default() -> Self {
        Self {
            use_cadain: true,
            use_confidence: true,
            match_mode: MatchMode::Inner,
        }
    }
}

fn cadain_tensor(cluster: &Tensor, input: &Tensor) -> Result<Tensor> {
    let (mu_d, sd_d) = channel_stats(cluster)?;
    let (mu_f, sd_f) = channel_stats(input)?;
    let normed = cluster.broadcast_sub(&mu_d)?.broadcast_div(&sd_d)?;
    Ok(normed.broadcast_mul(&sd_f)?.broadcast_add(&mu_f)?)
}

/// Gives `cluster` the per-channel spatial mean and standard deviation of
/// `input`. Both are `(B, C, h, w)`; a cluster batch of 1 is broadcast.
pub fn cadain(cluster: &ComponentFeature, input: &ComponentFeature) -> Result<ComponentFeature> {
    let (cb, cc, ch, cw) = cluster.dims();
    let (b, c, h, w) = input.dims();
    if (cc, ch, cw) != (c, h, w) || (cb != b && cb != 1) {
        return Err(Error::shape(format!(
            "CAdaIN of cluster {:?} onto input {:?}",
            cluster.data.dims(),
            input.data.dims()
        )));
    }
    Ok(ComponentFeature {
        component: input.component,
        scale: input.scale,
        data: cadain_tensor(&cluster.data, &input.data)?,
    })
}

#[derive(Debug, Clone)]
pub struct MatchResult {
    /// `scores[b][k]` for every batch item and cluster.
    pub scores: Vec<Vec<f64>>,
    /// Argmax per batch item, smallest index on exact ties.
    pub selected_index: Vec<usize>,
    /// The selected clusters, re-normalized to each input when CAdaIN is on.
    pub selected: ComponentFeature,
}

fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Scores `(B, K)` of every cluster against every input, computed with one
/// matrix product. For CAdaIN, `<F, s_F * N_k + m_F>` splits into a
/// correlation with the normalized cluster `N_k` plus a cluster-free term.
fn batched_scores(input: &Tensor, clusters: &Tensor, opts: &DftOptions) -> Result<Tensor> {
    let (b, c, h, w) = input.dims4()?;
    let k = clusters.dim(0)?;
    let n = c * h * w;
    let f = input.detach();
    let flat = |t: &Tensor, rows: usize| t.reshape((rows, n));
    if !opts.use_cadain {
        let raw = flat(&f, b)?.matmul(&flat(clusters, k)?.t()?)?;
        if opts.match_mode == MatchMode::Inner {
            return Ok(raw);
        }
        let fn_ = flat(&f, b)?.sqr()?.sum_keepdim(1)?.sqrt()?;
        let dn = flat(clusters, k)?.sqr()?.sum_keepdim(1)?.sqrt()?.t()?;
        return Ok(raw.broadcast_div(&fn_.broadcast_mul(&dn)?.clamp(1e-12, f64::INFINITY)?)?);
    }
    let (mu_d, sd_d) = channel_stats(clusters)?;
    let normed = clusters.broadcast_sub(&mu_d)?.broadcast_div(&sd_d)?;
    let (mu_f, sd_f) = channel_stats(&f)?;
    let weighted = f.broadcast_mul(&sd_f)?;
    let corr = flat(&weighted, b)?.matmul(&flat(&normed, k)?.t()?)?;
    let mu_f2 = mu_f.reshape((b, c))?;
    let sums = f.sum((2, 3))?;
    let offset = (&mu_f2 * &sums)?.sum_keepdim(1)?;
    let inner = corr.broadcast_add(&offset)?;
    if opts.match_mode == MatchMode::Inner {
        return Ok(inner);
    }
    // |s*N + m|^2 per channel = s^2 sum(N^2) + 2 s m sum(N) + hw m^2
    let nsq = normed.sqr()?.sum((2, 3))?; // (K, C)
    let nsum = normed.sum((2, 3))?;
    let sd2 = sd_f.reshape((b, c))?;
    let rd_norm2 = sd2
        .sqr()?
        .matmul(&nsq.t()?)?
        .add(&((&sd2 * &mu_f2)? * 2.0)?.matmul(&nsum.t()?)?)?
        .broadcast_add(&(mu_f2.sqr()?.sum_keepdim(1)? * (h * w) as f64)?)?;
    let f_norm = flat(&f, b)?.sqr()?.sum_keepdim(1)?.sqrt()?;
    let denom = rd_norm2.clamp(0.0, f64::INFINITY)?.sqrt()?.broadcast_mul(&f_norm)?;
    Ok(inner.broadcast_div(&denom.clamp(1e-12, f64::INFINITY)?)?)
}

/// Picks, for each input component, the dictionary cluster with the highest
/// similarity after re-normalizing every cluster to the input's statistics.
pub fn feature_match_with(input: &ComponentFeature, dict: &ComponentDictionary, opts: &DftOptions) -> Result<MatchResult> {
    let (b, c, h, w) = input.dims();
    let (dc, dh, dw) = dict.cluster_shape();
    if dict.k() == 0 {
        return Err(Error::param("dictionary has no clusters"));
    }
    if (dc, dh, dw) != (c, h, w) {
        return Err(Error::shape(format!(
            "dictionary ({}, {}) clusters are {:?}, input is {:?}",
            dict.scale(),
            dict.component(),
            (dc, dh, dw),
            (c, h, w)
        )));
    }
    let clusters = dict.tensor(input.data.dtype(), input.data.device())?;
    let scores_t = batched_scores(&input.data, &clusters, opts)?;
    let scores: Vec<Vec<f64>> = scores_t.to_dtype(DType::F64)?.to_vec2()?;
    let selected_index: Vec<usize> = scores.iter().map(|s| argmax_first(s)).collect();
    let idx = Tensor::from_vec(
        selected_index.iter().map(|&i| i as u32).collect::<Vec<_>>(),
        b,
        input.data.device(),
    )?;
    let picked = clusters.index_select(&idx, 0)?;
    let data = if opts.use_cadain {
        cadain_tensor(&picked, &input.data)?
    } else {
        picked
    };
    Ok(MatchResult {
        scores,
        selected_index,
        selected: ComponentFeature {
            component: input.component,
            scale: input.scale,
            data,
        },
    })
}

/// [`feature_match_with`] under the default options (CAdaIN, inner product).
pub fn feature_match(input: &ComponentFeature, dict: &ComponentDictionary) -> Result<MatchResult> {
    feature_match_with(input, dict, &DftOptions::default())
}

/// Learnable gate: conv3x3, LeakyReLU(0.2), conv3x3, sigmoid, all at C_s channels.
#[derive(Debug, Clone)]
pub struct ConfidenceParams {
    conv1: Conv2d,
    conv2: Conv2d,
    forced: Option<f64>,
}

impl ConfidenceParams {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(store, init, &format!("{name}.conv1"), channels, channels, 3, 1, 1.0)?,
            conv2: Conv2d::new(store, init, &format!("{name}.conv2"), channels, channels, 3, 1, 0.1)?,
            forced: None,
        })
    }

    /// Replaces the network output by a constant (`Some(0.0)`, `Some(1.0)`),
    /// or restores the learned gate with `None`.
    pub fn force(&mut self, value: Option<f64>) {
        self.forced = value;
    }

    pub fn forced(&self) -> Option<f64> {
        self.forced
    }

    /// Element-wise score in (0, 1) for a `(B, C, h, w)` residual.
    pub fn score(&self, residual: &Tensor) -> Result<Tensor> {
        if let Some(v) = self.forced {
            return Ok((residual.zeros_like()? + v)?);
        }
        let x = nn::leaky_relu(&self.conv1.forward(residual)?, 0.2)?;
        nn::sigmoid(&self.conv2.forward(&x)?)
    }
}

/// `F + RDic* * F_Conf(RDic* - F)`.
pub fn confidence_fuse(input: &ComponentFeature, matched: &MatchResult, params: &ConfidenceParams) -> Result<ComponentFeature> {
    Ok(confidence_fuse_scored(input, &matched.selected, params)?.0)
}

fn confidence_fuse_scored(
    input: &ComponentFeature,
    selected: &ComponentFeature,
    params: &ConfidenceParams,
) -> Result<(ComponentFeature, Tensor)> {
    if input.data.dims() != selected.data.dims() {
        return Err(Error::shape(format!(
            "fusing {:?} with matched {:?}",
            input.data.dims(),
            selected.data.dims()
        )));
    }
    let conf = params.score(&(&selected.data - &input.data)?)?;
    let data = (&input.data + (&selected.data * &conf)?)?;
    Ok((
        ComponentFeature {
            component: input.component,
            scale: input.scale,
            data,
        },
        conf,
    ))
}

/// Per-component outcome of one DFT block, one entry per batch item;
/// `None` where the component box was unusable.
#[derive(Debug, Clone, Default)]
pub struct DftDiagnostics {
    pub scale: usize,
    pub k_star: [Vec<Option<usize>>; 4],
    pub mean_confidence: [Vec<Option<f64>>; 4],
}

/// Component boxes per batch item; `None` skips that component.
pub type ComponentBoxes = [Option<RoiBox>; 4];

/// One DFT block at the scale of `fm`: each component is cropped, matched
/// against its dictionary, fused and pasted back (left eye, right eye,
/// nose, mouth). Cells outside every box are returned unchanged.
pub fn dft_block(
    fm: &FeatureMap,
    boxes: &[ComponentBoxes],
    dicts: &DictionarySet,
    confidence: Option<&ConfidenceParams>,
    opts: &DftOptions,
) -> Result<(FeatureMap, DftDiagnostics)> {
    let (b, _, _, _) = fm.dims();
    if boxes.len() != b {
        return Err(Error::shape(format!("{} box sets for a batch of {b}", boxes.len())));
    }
    let s = fm.scale;
    let mut out = fm.clone();
    let mut diag = DftDiagnostics {
        scale: s,
        ..Default::default()
    };
    for comp in Component::ALL {
        let ci = comp.index();
        let per_item: Vec<Option<RoiBox>> = boxes.iter().map(|bx| bx[ci]).collect();
        let Some(fallback) = per_item.iter().flatten().next().copied() else {
            log::warn!("scale {s}: no usable {comp} box in batch, passing through");
            diag.k_star[ci] = vec![None; b];
            diag.mean_confidence[ci] = vec![None; b];
            continue;
        };
        let dict = dicts.get(s, comp);
        let (_, h, w) = dict.cluster_shape();
        let filled: Vec<RoiBox> = per_item.iter().map(|o| o.unwrap_or(fallback)).collect();
        // crops come from the block input, not from partially pasted output
        let crop = roi_align(fm, &filled, (h, w))?;
        let matched = feature_match_with(&crop, dict, opts)?;
        let (fused, conf) = if opts.use_confidence {
            let params = confidence.ok_or_else(|| Error::Config("confidence fusion enabled without a confidence block".into()))?;
            let (f, c) = confidence_fuse_scored(&crop, &matched.selected, params)?;
            (f, Some(c))
        } else {
            (matched.selected.clone(), None)
        };
        out = reverse_roi_align_partial(&out, &fused, &per_item)?;
        let means: Option<Vec<f64>> = match conf {
            Some(c) => Some(c.detach().mean((1, 2, 3))?.to_dtype(DType::F64)?.to_vec1()?),
            None => None,
        };
        diag.k_star[ci] = per_item
            .iter()
            .zip(&matched.selected_index)
            .map(|(o, &k)| o.map(|_| k))
            .collect();
        diag.mean_confidence[ci] = per_item
            .iter()
            .enumerate()
            .map(|(i, o)| o.and(means.as_ref().map(|m| m[i])))
            .collect();
    }
    Ok((out, diag))
}

#[cfg(test)]
mod tests;
