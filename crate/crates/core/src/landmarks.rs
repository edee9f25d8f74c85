//! 68-point facial landmark sets.

use std::path::Path;

use crate::error::{Error, Result};

pub const NUM_LANDMARKS: usize = 68;

/// Points in pixel coordinates of the associated image, in the usual
/// 68-point order (jaw 1-17, brows 18-27, nose 28-36, eyes 37-48, mouth 49-68).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    points: Vec<(f64, f64)>,
}

impl LandmarkSet {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.len() != NUM_LANDMARKS {
            return Err(Error::Data(format!("expected {NUM_LANDMARKS} landmarks, got {}", points.len())));
        }
        if points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Data("landmark coordinates must be finite".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Points for a 1-indexed inclusive range, e.g. `range(37, 42)`.
    pub fn range(&self, first: usize, last: usize) -> &[(f64, f64)] {
        &self.points[first - 1..last]
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|(x, y)| (x + dx, y + dy)).collect(),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            points: self.points.iter().map(|(x, y)| (x * factor, y * factor)).collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut points = Vec::with_capacity(NUM_LANDMARKS);
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut it = line.split_whitespace();
            let mut coord = || -> Result<f64> {
                it.next()
                    .ok_or_else(|| Error::Data(format!("landmark line {} has fewer than 2 values", no + 1)))?
                    .parse()
                    .map_err(|_| Error::Data(format!("landmark line {} is not numeric", no + 1)))
            };
            let x = coord()?;
            let y = coord()?;
            points.push((x, y));
        }
        Self::new(points)
    }

    pub fn to_text(&self) -> String {
        self.points.iter().map(|(x, y)| format!("{x} {y}\n")).collect()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}
