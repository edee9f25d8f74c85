//! Paired (degraded, ground truth) datasets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::FaceRecord;
use crate::degradation::{apply_degradation, sample_degradation_with_scale, DegradationParams};
use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Image};
use crate::landmarks::LandmarkSet;

pub const PAIRS_INDEX: &str = "pairs.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Task {
    X4,
    X8,
    Blind,
}

impl Task {
    /// The pinned downsampling factor, if any.
    pub fn fixed_scale(self) -> Option<f64> {
        match self {
            Task::X4 => Some(4.0),
            Task::X8 => Some(8.0),
            Task::Blind => None,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::X4 => "x4",
            Task::X8 => "x8",
            Task::Blind => "blind",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x4" => Ok(Task::X4),
            "x8" => Ok(Task::X8),
            "blind" => Ok(Task::Blind),
            _ => Err(Error::Config(format!("unknown task {s:?} (x4|x8|blind)"))),
        }
    }
}

/// One training or evaluation example. `lq` is the degraded image resampled
/// back to the size of `hq`; `landmarks` are the ground-truth points of `hq`.
#[derive(Debug, Clone)]
pub struct Pair {
    pub id: String,
    pub task: Task,
    pub params: DegradationParams,
    pub hq: Image,
    pub lq: Image,
    pub landmarks: LandmarkSet,
}

fn pair_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Degrades every record with landmarks. Images are first brought to
/// `resolution` (landmarks scaled alongside); records without landmarks
/// are skipped with a warning.
pub fn make_pairs(records: &[FaceRecord], task: Task, seed: u64, resolution: usize) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(records.len());
    for (i, rec) in records.iter().enumerate() {
        let Some(lm) = &rec.landmarks else {
            log::warn!("{}: no landmarks, skipped", rec.id);
            continue;
        };
        let (h, w) = (rec.image.height(), rec.image.width());
        if h != w {
            log::warn!("{}: image is {h}x{w}, not square; skipped", rec.id);
            continue;
        }
        let (hq, landmarks) = if h == resolution {
            (rec.image.clone(), lm.clone())
        } else {
            (
                resize_bicubic(&rec.image, resolution, resolution),
                lm.scaled(resolution as f64 / h as f64),
            )
        };
        let params = sample_degradation_with_scale(&mut pair_rng(seed, i), task.fixed_scale());
        let small = apply_degradation(&hq, &params)?;
        let mut lq = resize_bicubic(&small, resolution, resolution);
        lq.clip();
        out.push(Pair {
            id: rec.id.clone(),
            task,
            params,
            hq,
            lq,
            landmarks,
        });
    }
    Ok(out)
}

/// Writes `hq/`, `lq/`, `landmarks/` and `manifests/` under `dir`, plus an
/// index listing `id task` per line.
pub fn save_pairs(pairs: &[Pair], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["hq", "lq", "landmarks", "manifests"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut index = String::new();
    for p in pairs {
        p.hq.save(dir.join("hq").join(format!("{}.png", p.id)))?;
        p.lq.save(dir.join("lq").join(format!("{}.png", p.id)))?;
        p.landmarks.save(dir.join("landmarks").join(format!("{}.txt", p.id)))?;
        fs::write(
            dir.join("manifests").join(format!("{}.txt", p.id)),
            format!("task={}\n{}", p.task, p.params.to_manifest()),
        )?;
        index.push_str(&format!("{} {}\n", p.id, p.task));
    }
    fs::write(dir.join(PAIRS_INDEX), index)?;
    Ok(())
}

pub fn load_pairs(dir: impl AsRef<Path>) -> Result<Vec<Pair>> {
    let dir = dir.as_ref();
    let index = fs::read_to_string(dir.join(PAIRS_INDEX))?;
    let mut out = Vec::new();
    for line in index.lines().filter(|l| !l.trim().is_empty()) {
        let (id, task) = line
            .split_once(' ')
            .ok_or_else(|| Error::Data(format!("bad pairs index line {line:?}")))?;
        let manifest = fs::read_to_string(dir.join("manifests").join(format!("{id}.txt")))?;
        out.push(Pair {
            id: id.to_string(),
            task: task.trim().parse()?,
            params: DegradationParams::from_manifest(&manifest)?,
            hq: Image::load(dir.join("hq").join(format!("{id}.png")))?,
            lq: Image::load(dir.join("lq").join(format!("{id}.png")))?,
            landmarks: LandmarkSet::load(dir.join("landmarks").join(format!("{id}.txt")))?,
        });
    }
    Ok(out)
}
