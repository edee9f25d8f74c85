//! Per-image fidelity evaluation against a bicubic baseline.

use std::fmt::Write as _;

use candle_core::{Device, Tensor};

use super::metrics::{psnr, ssim, PerceptualMetric};
use super::pairs::{Pair, Task};
use crate::dictionary::DictionarySet;
use crate::error::Result;
use crate::imaging::Image;
use crate::restorer::{face_boxes, Generator};

pub const EVAL_HEADER: &str = "id,task,psnr_db,ssim,psnr_bicubic_db,ssim_bicubic";

const EVAL_BATCH: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub id: String,
    pub task: Task,
    pub psnr_db: f64,
    pub ssim: f64,
    /// The degraded input (bicubically resampled) scored against ground truth.
    pub psnr_bicubic_db: f64,
    pub ssim_bicubic: f64,
    pub perceptual: Option<f64>,
}

/// Scores `restored` and the pair's bicubic input against its ground truth.
pub fn score_pair(restored: &Image, pair: &Pair, perceptual: Option<&dyn PerceptualMetric>) -> Result<EvalRecord> {
    Ok(EvalRecord {
        id: pair.id.clone(),
        task: pair.task,
        psnr_db: psnr(restored, &pair.hq)?,
        ssim: ssim(restored, &pair.hq)?,
        psnr_bicubic_db: psnr(&pair.lq, &pair.hq)?,
        ssim_bicubic: ssim(&pair.lq, &pair.hq)?,
        perceptual: perceptual.map(|m| m.distance(restored, &pair.hq)).transpose()?,
    })
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Which checkpoint (and dictionary) produced the rows.
    pub model: String,
    pub perceptual_name: Option<String>,
    pub records: Vec<EvalRecord>,
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl EvalReport {
    pub fn mean_psnr(&self) -> f64 {
        mean(self.records.iter().map(|r| r.psnr_db))
    }

    pub fn mean_ssim(&self) -> f64 {
        mean(self.records.iter().map(|r| r.ssim))
    }

    pub fn mean_psnr_bicubic(&self) -> f64 {
        mean(self.records.iter().map(|r| r.psnr_bicubic_db))
    }

    pub fn mean_ssim_bicubic(&self) -> f64 {
        mean(self.records.iter().map(|r| r.ssim_bicubic))
    }

    /// One row per image; a perceptual column is appended when one was computed.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(EVAL_HEADER);
        if let Some(n) = &self.perceptual_name {
            write!(s, ",{n}").unwrap();
        }
        s.push('\n');
        for r in &self.records {
            write!(
                s,
                "{},{},{:.4},{:.6},{:.4},{:.6}",
                r.id, r.task, r.psnr_db, r.ssim, r.psnr_bicubic_db, r.ssim_bicubic
            )
            .unwrap();
            if self.perceptual_name.is_some() {
                write!(s, ",{:.6}", r.perceptual.unwrap_or(f64::NAN)).unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn summary(&self) -> String {
        format!(
            "model={}\nimages={}\nmean_psnr_db={:.4}\nmean_ssim={:.6}\nmean_psnr_bicubic_db={:.4}\nmean_ssim_bicubic={:.6}\n",
            self.model,
            self.records.len(),
            self.mean_psnr(),
            self.mean_ssim(),
            self.mean_psnr_bicubic(),
            self.mean_ssim_bicubic()
        )
    }
}

/// Restores every pair and scores it. Read-only with respect to the model;
/// metrics are computed on scoped threads.
pub fn evaluate(
    generator: &Generator,
    dicts: Option<&DictionarySet>,
    pairs: &[Pair],
    model: &str,
    perceptual: Option<&dyn PerceptualMetric>,
) -> Result<EvalReport> {
    let r = generator.config().resolution;
    let mut restored = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(EVAL_BATCH) {
        let imgs: Vec<&Image> = chunk.iter().map(|p| &p.lq).collect();
        let x = Image::batch_to_tensor(&imgs, generator.dtype(), &Device::Cpu)?;
        let boxes: Vec<_> = chunk.iter().map(|p| face_boxes(&p.landmarks, r)).collect();
        let (out, _) = generator.forward(&x, &boxes, dicts)?;
        restored.extend(tensor_images(&out)?);
    }
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).max(1);
    let per = pairs.len().div_ceil(threads).max(1);
    let records = std::thread::scope(|s| {
        let handles: Vec<_> = pairs
            .chunks(per)
            .zip(restored.chunks(per))
            .map(|(ps, rs)| {
                s.spawn(move || {
                    ps.iter()
                        .zip(rs)
                        .map(|(p, img)| score_pair(img, p, perceptual))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("metric thread panicked"))
            .collect::<Result<Vec<Vec<_>>>>()
    })?;
    Ok(EvalReport {
        model: model.to_string(),
        perceptual_name: perceptual.map(|m| m.name().to_string()),
        records: records.into_iter().flatten().collect(),
    })
}

/// Splits a `(B, 3, H, W)` batch into images.
pub fn tensor_images(t: &Tensor) -> Result<Vec<Image>> {
    (0..t.dims()[0]).map(|i| Image::from_tensor(t, i)).collect()
}
