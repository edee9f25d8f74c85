//! Synthetic degradation: blur, downsample, additive noise, JPEG.
//!
//! `degraded = JPEG_q( (image * k) resized by 1/r + n_sigma )`, clipped to `[0, 1]`.

use std::fmt;
use std::io::Cursor;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imaging::{resize_bicubic, Image};

/// Number of kernels in the motion blur bank.
pub const MOTION_BANK_SIZE: usize = 32;
/// Spatial extent of every motion kernel.
pub const MOTION_KERNEL_SIZE: usize = 15;
/// Seed the frozen motion bank was generated with.
pub const MOTION_BANK_SEED: u64 = 0x5eed_d1c7;

const FROZEN_MOTION_BANK: &str = include_str!("../assets/motion_kernels.txt");

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelKind {
    Gaussian { sigma: f64 },
    Motion { index: usize },
}

/// Normalized, non-negative, odd-sized square blur kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct BlurKernel {
    kind: KernelKind,
    size: usize,
    taps: Vec<f64>,
}

impl BlurKernel {
    fn from_taps(kind: KernelKind, size: usize, mut taps: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 || taps.len() != size * size {
            return Err(Error::param(format!("kernel must be odd-sized, got {size}")));
        }
        let total: f64 = taps.iter().sum();
        if !(total > 0.0) || taps.iter().any(|t| *t < 0.0 || !t.is_finite()) {
            return Err(Error::param("kernel taps must be finite, non-negative and not all zero"));
        }
        for t in &mut taps {
            *t /= total;
        }
        Ok(Self { kind, size, taps })
    }

    pub fn delta(kind: KernelKind, size: usize) -> Self {
        let mut taps = vec![0.0; size * size];
        taps[size * size / 2] = 1.0;
        Self { kind, size, taps }
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn taps(&self) -> &[f64] {
        &self.taps
    }

    pub fn tap(&self, y: usize, x: usize) -> f64 {
        self.taps[y * self.size + x]
    }

    pub fn is_delta(&self) -> bool {
        let c = self.size * self.size / 2;
        self.taps
            .iter()
            .enumerate()
            .all(|(i, &t)| if i == c { t == 1.0 } else { t == 0.0 })
    }
}

/// Isotropic Gaussian kernel normalized to unit sum.
pub fn gaussian_kernel(sigma: f64, size: usize) -> Result<BlurKernel> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::param(format!("gaussian sigma must be positive, got {sigma}")));
    }
    if size % 2 == 0 {
        return Err(Error::param(format!("kernel size must be odd, got {size}")));
    }
    let kind = KernelKind::Gaussian { sigma };
    let r = (size / 2) as f64;
    let taps = (0..size * size)
        .map(|i| {
            let dy = (i / size) as f64 - r;
            let dx = (i % size) as f64 - r;
            (-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    BlurKernel::from_taps(kind, size, taps)
}

/// Gaussian kernel with a `2*ceil(3 sigma) + 1` support.
pub fn gaussian_kernel_auto(sigma: f64) -> Result<BlurKernel> {
    if !(sigma > 0.0) {
        return Err(Error::param(format!("gaussian sigma must be positive, got {sigma}")));
    }
    gaussian_kernel(sigma, 2 * (3.0 * sigma).ceil() as usize + 1)
}

/// Trajectory length (number of random-walk vertices) used by bank kernel `index`.
pub fn motion_trajectory_length(index: usize) -> usize {
    3 + (index * 5) % 11
}

/// Procedural motion kernel `index` of the bank generated with `seed`.
pub fn motion_kernel(index: usize, seed: u64) -> Result<BlurKernel> {
    motion_kernel_with_length(index, seed, motion_trajectory_length(index))
}

/// Rasterizes a smoothed random-walk camera trajectory.
///
/// The walk has `length` unit steps whose heading drifts by a Gaussian
/// increment, is traced by a Catmull-Rom spline and splatted bilinearly
/// onto the kernel grid. A single-vertex trajectory yields the delta kernel.
pub fn motion_kernel_with_length(index: usize, seed: u64, length: usize) -> Result<BlurKernel> {
    if index >= MOTION_BANK_SIZE {
        return Err(Error::param(format!(
            "motion kernel index {index} outside 0..{MOTION_BANK_SIZE}"
        )));
    }
    if length == 0 {
        return Err(Error::param("motion trajectory needs at least one vertex"));
    }
    let kind = KernelKind::Motion { index };
    let size = MOTION_KERNEL_SIZE;
    if length == 1 {
        return Ok(BlurKernel::delta(kind, size));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let turn = Normal::new(0.0, 0.6).expect("valid normal");
    let mut heading: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut pts = vec![(0.0f64, 0.0f64)];
    for _ in 1..length {
        heading += turn.sample(&mut rng);
        let (x, y) = *pts.last().unwrap();
        pts.push((x + heading.cos(), y + heading.sin()));
    }
    let (minx, maxx) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (miny, maxy) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let extent = (maxx - minx).max(maxy - miny);
    let limit = (size - 3) as f64;
    let scale = if extent > limit { limit / extent } else { 1.0 };
    let (cx, cy) = ((minx + maxx) / 2.0, (miny + maxy) / 2.0);
    let half = (size / 2) as f64;
    let pts: Vec<(f64, f64)> = pts
        .iter()
        .map(|&(x, y)| ((x - cx) * scale + half, (y - cy) * scale + half))
        .collect();

    let mut taps = vec![0.0; size * size];
    let at = |i: isize| pts[i.clamp(0, pts.len() as isize - 1) as usize];
    const SAMPLES: usize = 24;
    for seg in 0..pts.len() - 1 {
        let (p0, p1, p2, p3) = (at(seg as isize - 1), at(seg as isize), at(seg as isize + 1), at(seg as isize + 2));
        for s in 0..SAMPLES {
            let t = s as f64 / SAMPLES as f64;
            let cr = |a: f64, b: f64, c: f64, d: f64| {
                0.5 * (2.0 * b + (-a + c) * t + (2.0 * a - 5.0 * b + 4.0 * c - d) * t * t + (-a + 3.0 * b - 3.0 * c + d) * t * t * t)
            };
            let x = cr(p0.0, p1.0, p2.0, p3.0);
            let y = cr(p0.1, p1.1, p2.1, p3.1);
            splat(&mut taps, size, x, y);
        }
    }
    let last = *pts.last().unwrap();
    splat(&mut taps, size, last.0, last.1);
    BlurKernel::from_taps(kind, size, taps)
}

fn splat(taps: &mut [f64], size: usize, x: f64, y: f64) {
    let x = x.clamp(0.0, (size - 1) as f64);
    let y = y.clamp(0.0, (size - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(size - 1), (y0 + 1).min(size - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    taps[y0 * size + x0] += (1.0 - fx) * (1.0 - fy);
    taps[y0 * size + x1] += fx * (1.0 - fy);
    taps[y1 * size + x0] += (1.0 - fx) * fy;
    taps[y1 * size + x1] += fx * fy;
}

/// Text serialization of a kernel bank: one kernel per line, `index:` then
/// `size*size` taps in round-trip exact scientific notation.
pub fn format_bank(bank: &[BlurKernel]) -> String {
    let mut out = String::new();
    for (i, k) in bank.iter().enumerate() {
        out.push_str(&format!("{i}:"));
        for t in &k.taps {
            out.push_str(&format!(" {t:e}"));
        }
        out.push('\n');
    }
    out
}

fn parse_bank(text: &str) -> Result<Vec<BlurKernel>> {
    let mut bank = Vec::with_capacity(MOTION_BANK_SIZE);
    for (line_no, line) in text.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let (idx, rest) = line
            .split_once(':')
            .ok_or_else(|| Error::Data(format!("motion bank line {line_no} lacks an index")))?;
        let index: usize = idx.trim().parse().map_err(|_| Error::Data(format!("bad motion index {idx}")))?;
        let taps = rest
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| Error::Data(format!("bad motion tap {v}"))))
            .collect::<Result<Vec<_>>>()?;
        if index != line_no || taps.len() != MOTION_KERNEL_SIZE * MOTION_KERNEL_SIZE {
            return Err(Error::Data(format!("malformed motion bank entry {line_no}")));
        }
        bank.push(BlurKernel {
            kind: KernelKind::Motion { index },
            size: MOTION_KERNEL_SIZE,
            taps,
        });
    }
    if bank.len() != MOTION_BANK_SIZE {
        return Err(Error::Data(format!("motion bank has {} kernels", bank.len())));
    }
    Ok(bank)
}

/// Regenerates the bank from [`MOTION_BANK_SEED`].
pub fn generate_motion_bank() -> Vec<BlurKernel> {
    (0..MOTION_BANK_SIZE)
        .map(|i| motion_kernel(i, MOTION_BANK_SEED).expect("bank indices are in range"))
        .collect()
}

/// The frozen 32-kernel motion bank shipped with the crate.
pub fn motion_bank() -> &'static [BlurKernel] {
    static BANK: OnceLock<Vec<BlurKernel>> = OnceLock::new();
    BANK.get_or_init(|| parse_bank(FROZEN_MOTION_BANK).expect("embedded motion bank is well-formed"))
}

/// One draw of the degradation model.
#[derive(Debug, Clone, PartialEq)]
pub struct DegradationParams {
    pub kernel: BlurKernel,
    /// Downsampling factor `r`; output side is `round(side / r)`.
    pub downsample: f64,
    /// Noise standard deviation on the 0-255 intensity scale.
    pub noise_sigma: f64,
    /// `None` bypasses compression (tests only).
    pub jpeg_quality: Option<u8>,
    pub noise_seed: u64,
}

/// Inclusive value grid `start:step:end` expressed in tenths.
fn grid_tenths<R: Rng + ?Sized>(rng: &mut R, lo_tenths: u32, hi_tenths: u32) -> f64 {
    rng.gen_range(lo_tenths..=hi_tenths) as f64 / 10.0
}

/// Samples blur kind, blur strength, `r`, noise level and JPEG quality on their grids.
pub fn sample_degradation<R: Rng + ?Sized>(rng: &mut R) -> DegradationParams {
    sample_degradation_with_scale(rng, None)
}

/// As [`sample_degradation`] but with the downsampling factor pinned when `fixed_r` is set.
pub fn sample_degradation_with_scale<R: Rng + ?Sized>(rng: &mut R, fixed_r: Option<f64>) -> DegradationParams {
    let kernel = if rng.gen_bool(0.5) {
        let sigma = grid_tenths(rng, 10, 50);
        gaussian_kernel_auto(sigma).expect("grid sigma is positive")
    } else {
        motion_bank()[rng.gen_range(0..MOTION_BANK_SIZE)].clone()
    };
    let r = grid_tenths(rng, 10, 80);
    let noise_sigma = rng.gen_range(0..=15u32) as f64;
    let q = rng.gen_range(40..=80u8);
    let noise_seed = rng.gen();
    DegradationParams {
        kernel,
        downsample: fixed_r.unwrap_or(r),
        noise_sigma,
        jpeg_quality: Some(q),
        noise_seed,
    }
}

impl DegradationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.downsample >= 1.0) || !self.downsample.is_finite() {
            return Err(Error::param(format!("downsample factor must be >= 1, got {}", self.downsample)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::param(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if let Some(q) = self.jpeg_quality {
            if !(1..=100).contains(&q) {
                return Err(Error::param(format!("JPEG quality {q} outside 1..=100")));
            }
        }
        Ok(())
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let f = |n: usize| ((n as f64 / self.downsample).round() as usize).max(1);
        (f(h), f(w))
    }

    /// `key=value` lines describing this draw.
    pub fn to_manifest(&self) -> String {
        let mut s = String::new();
        match self.kernel.kind {
            KernelKind::Gaussian { sigma } => s.push_str(&format!("kernel=gaussian\nkernel_sigma={sigma}\n")),
            KernelKind::Motion { index } => s.push_str(&format!("kernel=motion\nkernel_index={index}\n")),
        }
        s.push_str(&format!("kernel_size={}\n", self.kernel.size));
        s.push_str(&format!("downsample={}\n", self.downsample));
        s.push_str(&format!("noise_sigma={}\n", self.noise_sigma));
        match self.jpeg_quality {
            Some(q) => s.push_str(&format!("jpeg_quality={q}\n")),
            None => s.push_str("jpeg_quality=none\n"),
        }
        s.push_str(&format!("noise_seed={}\n", self.noise_seed));
        s
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        let kv = crate::config::parse_key_values(text)?;
        let get = |k: &str| kv.get(k).map(String::as_str).ok_or_else(|| Error::Data(format!("manifest lacks {k}")));
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Data(format!("bad value for {k}"))) };
        let size = num("kernel_size")? as usize;
        let kernel = match get("kernel")? {
            "gaussian" => gaussian_kernel(num("kernel_sigma")?, size)?,
            "motion" => {
                let index = num("kernel_index")? as usize;
                motion_bank()
                    .get(index)
                    .cloned()
                    .ok_or_else(|| Error::param(format!("motion index {index} out of range")))?
            }
            other => return Err(Error::Data(format!("unknown kernel kind {other}"))),
        };
        let jpeg_quality = match get("jpeg_quality")? {
            "none" => None,
            q => Some(q.parse().map_err(|_| Error::Data(format!("bad JPEG quality {q}")))?),
        };
        let p = Self {
            kernel,
            downsample: num("downsample")?,
            noise_sigma: num("noise_sigma")?,
            jpeg_quality,
            noise_seed: get("noise_seed")?.parse().map_err(|_| Error::Data("bad noise seed".into()))?,
        };
        p.validate()?;
        Ok(p)
    }
}

/// Kernel specification as accepted on the command line: `gaussian:SIGMA` or `motion:IDX`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum KernelSpec {
    Gaussian(f64),
    Motion(usize),
}

impl FromStr for KernelSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, value) = s
            .split_once(':')
            .ok_or_else(|| Error::param(format!("kernel spec {s} is not KIND:VALUE")))?;
        match kind {
            "gaussian" => Ok(Self::Gaussian(value.parse().map_err(|_| Error::param(format!("bad sigma {value}")))?)),
            "motion" => Ok(Self::Motion(value.parse().map_err(|_| Error::param(format!("bad index {value}")))?)),
            _ => Err(Error::param(format!("unknown kernel kind {kind}"))),
        }
    }
}

impl fmt::Display for KernelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Gaussian(s) => write!(f, "gaussian:{s}"),
            Self::Motion(i) => write!(f, "motion:{i}"),
        }
    }
}

impl KernelSpec {
    pub fn kernel(&self) -> Result<BlurKernel> {
        match *self {
            Self::Gaussian(s) => gaussian_kernel_auto(s),
            Self::Motion(i) => motion_bank()
                .get(i)
                .cloned()
                .ok_or_else(|| Error::param(format!("motion index {i} out of range"))),
        }
    }
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Convolution with reflect padding (edge sample not repeated).
pub fn blur(img: &Image, kernel: &BlurKernel) -> Image {
    if kernel.is_delta() {
        return img.clone();
    }
    let (h, w) = (img.height(), img.width());
    let r = (kernel.size / 2) as isize;
    let nonzero: Vec<(isize, isize, f64)> = (0..kernel.size)
        .flat_map(|ky| (0..kernel.size).map(move |kx| (ky, kx)))
        .filter_map(|(ky, kx)| {
            let t = kernel.tap(ky, kx);
            (t != 0.0).then_some((ky as isize - r, kx as isize - r, t))
        })
        .collect();
    let mut out = Image::new(h, w);
    for c in 0..Image::CHANNELS {
        let src = img.plane(c);
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0f64;
                for &(dy, dx, t) in &nonzero {
                    let sy = reflect(y as isize - dy, h);
                    let sx = reflect(x as isize - dx, w);
                    acc += t * src[sy * w + sx] as f64;
                }
                dst[y * w + x] = acc as f32;
            }
        }
    }
    out
}

/// Baseline JPEG encode/decode round trip at quality `q`.
pub fn jpeg_round_trip(img: &Image, q: u8) -> Result<Image> {
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut Cursor::new(&mut buf), q).encode_image(&rgb)?;
    let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?.to_rgb8();
    Ok(Image::from_rgb8(&decoded))
}

/// Applies blur, downsampling, noise and JPEG in that order.
pub fn apply_degradation(img: &Image, params: &DegradationParams) -> Result<Image> {
    params.validate()?;
    let blurred = blur(img, &params.kernel);
    let (oh, ow) = params.output_size(img.height(), img.width());
    let mut small = if params.downsample == 1.0 {
        blurred
    } else {
        resize_bicubic(&blurred, oh, ow)
    };
    if params.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(params.noise_seed);
        let dist = Normal::new(0.0, params.noise_sigma / 255.0).map_err(|e| Error::param(e.to_string()))?;
        for v in small.data_mut() {
            *v += dist.sample(&mut rng) as f32;
        }
    }
    small.clip();
    let mut out = match params.jpeg_quality {
        Some(q) => jpeg_round_trip(&small, q)?,
        None => small,
    };
    out.clip();
    Ok(out)
}
