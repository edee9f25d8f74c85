//! Training objectives: pixel + perceptual reconstruction, multi-scale hinge
//! adversarial losses and spectrally normalized discriminators.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::imaging::TensorResize;
use crate::nn::{self, Init, ParamStore};

/// Image scales the discriminators look at.
pub const DISC_SCALES: [usize; 4] = [1, 2, 4, 8];

/// Floor for the estimated singular value.
pub const SN_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

impl fmt::Display for Reduction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        })
    }
}

impl FromStr for Reduction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Reduction::Mean),
            "sum" => Ok(Reduction::Sum),
            _ => Err(Error::Config(format!("unknown reduction {s:?} (mean|sum)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub l2: f64,
    /// Perceptual weight per encoder scale 1..4.
    pub perceptual: [f64; 4],
    /// Adversarial weight per discriminator scale, ordered as [`DISC_SCALES`].
    pub adversarial: [f64; 4],
    pub pixel_reduction: Reduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l2: 100.0,
            perceptual: [0.5, 1.0, 2.0, 4.0],
            adversarial: [4.0, 2.0, 1.0, 1.0],
            pixel_reduction: Reduction::Mean,
        }
    }
}

fn parse_list(k: &str, v: &str) -> Result<[f64; 4]> {
    let vals: Vec<f64> = v
        .split(',')
        .map(|x| x.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Config(format!("bad value for {k}: {v}")))?;
    vals.try_into()
        .map_err(|_| Error::Config(format!("{k} needs four comma-separated values")))
}

fn join(v: &[f64; 4]) -> String {
    v.map(|x| x.to_string()).join(",")
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = std::iter::once(self.l2)
            .chain(self.perceptual)
            .chain(self.adversarial);
        for w in all {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weights must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    pub fn adversarial_enabled(&self) -> bool {
        self.adversarial.iter().any(|&w| w > 0.0)
    }

    pub fn to_text(&self) -> String {
        let mut t = String::new();
        writeln!(t, "lambda_l2={}", self.l2).unwrap();
        writeln!(t, "lambda_p={}", join(&self.perceptual)).unwrap();
        writeln!(t, "lambda_a={}", join(&self.adversarial)).unwrap();
        writeln!(t, "pixel_loss_reduction={}", self.pixel_reduction).unwrap();
        t
    }

    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut w = Self::default();
        for (k, v) in kv {
            match k.as_str() {
                "lambda_l2" => w.l2 = v.parse().map_err(|_| Error::Config(format!("bad value for {k}: {v}")))?,
                "lambda_p" => w.perceptual = parse_list(k, v)?,
                "lambda_a" => w.adversarial = parse_list(k, v)?,
                "pixel_loss_reduction" => w.pixel_reduction = v.parse()?,
                _ => {}
            }
        }
        w.validate()?;
        Ok(w)
    }
}

/// Reconstruction loss and its parts, all scalar tensors.
#[derive(Debug, Clone)]
pub struct RecLoss {
    pub total: Tensor,
    pub pixel: Tensor,
    pub perceptual: [Tensor; 4],
}

/// `l2 * ||I - J||^2 + sum_m p_m / (C_m H_m W_m) * ||psi_m(I) - psi_m(J)||^2`,
/// averaged over the batch. With [`Reduction::Mean`] the pixel term is
/// divided by the per-image element count as well.
pub fn reconstruction_loss(restored: &Tensor, target: &Tensor, psi: &Encoder, weights: &LossWeights) -> Result<RecLoss> {
    if restored.dims() != target.dims() {
        return Err(Error::shape(format!(
            "restored {:?} vs target {:?}",
            restored.dims(),
            target.dims()
        )));
    }
    let (b, c, h, w) = restored.dims4()?;
    let diff = (restored - target)?;
    let sq = diff.sqr()?.sum_all()?;
    let per_image = match weights.pixel_reduction {
        Reduction::Mean => (b * c * h * w) as f64,
        Reduction::Sum => b as f64,
    };
    let pixel = (sq * (weights.l2 / per_image))?;

    let fr = psi.forward(restored)?;
    let ft = psi.forward(&target.detach())?;
    let mut total = pixel.clone();
    let mut parts = Vec::with_capacity(4);
    for (m, (a, t)) in fr.iter().zip(ft.iter()).enumerate() {
        let (_, cm, hm, wm) = a.dims4()?;
        let d = (a - t.detach())?.sqr()?.sum_all()?;
        let term = (d * (weights.perceptual[m] / (b * cm * hm * wm) as f64))?;
        total = (total + &term)?;
        parts.push(term);
    }
    Ok(RecLoss {
        total,
        pixel,
        perceptual: parts.try_into().expect("four scales"),
    })
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let n = nn::scalar(&x.sqr()?.sum_all()?)?.sqrt().max(SN_EPS);
    Ok((x / n)?)
}

/// Power-iteration spectral normalization of `weight` viewed as an
/// `(out, rest)` matrix. Runs `iterations` steps from `u` (length `out`),
/// then returns `weight / sigma`, the updated `u`, and `sigma = u' W v`.
/// `u` and `v` are treated as constants; gradients reach `weight` through
/// both the numerator and `sigma`.
pub fn spectral_normalize(weight: &Tensor, u: &Tensor, iterations: usize) -> Result<(Tensor, Tensor, f64)> {
    let dims = weight.dims().to_vec();
    let rows = dims[0];
    let mat = weight.reshape((rows, weight.elem_count() / rows))?;
    let w_const = mat.detach();
    let mut u = u.detach().reshape((rows, 1))?;
    let mut v = l2_normalize(&w_const.t()?.matmul(&u)?)?;
    for i in 0..iterations {
        if i > 0 {
            v = l2_normalize(&w_const.t()?.matmul(&u)?)?;
        }
        u = l2_normalize(&w_const.matmul(&v)?)?;
    }
    let sigma_t = u.t()?.matmul(&mat.matmul(&v)?)?.reshape(())?;
    let sigma = nn::scalar(&sigma_t)?;
    let normalized = if sigma.abs() < SN_EPS {
        (weight * (1.0 / SN_EPS))?
    } else {
        weight.broadcast_div(&sigma_t)?
    };
    Ok((normalized, u.reshape(rows)?, sigma))
}

/// Convolution whose weight is spectrally normalized at every forward.
#[derive(Debug, Clone)]
pub struct SnConv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
    u: Tensor,
}

impl SnConv {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cin: usize, cout: usize, stride: usize) -> Result<Self> {
        let (dtype, device) = (store.dtype(), store.device().clone());
        let w = init.conv_weight(cout, cin, 3, 1.0, dtype, &device)?;
        let u = nn::to_f64_vec(&init.normal(&[cout], 1.0, DType::F64, &device)?)?;
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt().max(SN_EPS);
        let u = nn::tensor_from_f64(u.iter().map(|x| x / n).collect(), &[cout], dtype, &device)?;
        Ok(Self {
            weight: store.insert(format!("{name}.weight"), w)?,
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(cout, dtype, &device)?)?,
            stride,
            padding: 1,
            u,
        })
    }

    pub fn u(&self) -> &Tensor {
        &self.u
    }

    /// Training-mode forward: one power iteration, `u` is updated.
    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let (w, u, _) = spectral_normalize(&self.weight, &self.u, 1)?;
        self.u = u;
        nn::conv2d(x, &w, Some(&self.bias), self.stride, self.padding)
    }

    /// Uses the stored `u` and detached weights, so gradients only reach `x`.
    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let (w, _, _) = spectral_normalize(&self.weight.detach(), &self.u, 0)?;
        nn::conv2d(x, &w, Some(&self.bias.detach()), self.stride, self.padding)
    }
}

/// Four stride-2 convolutions with LeakyReLU(0.2), then a 3x3 convolution
/// to one channel giving a patch score map.
#[derive(Debug, Clone)]
pub struct Discriminator {
    layers: Vec<SnConv>,
}

impl Discriminator {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, base: usize) -> Result<Self> {
        let mut layers = Vec::with_capacity(5);
        let mut cin = 3;
        for i in 0..4 {
            let cout = base << i.min(2);
            layers.push(SnConv::new(store, init, &format!("{name}.conv{i}"), cin, cout, 2)?);
            cin = cout;
        }
        layers.push(SnConv::new(store, init, &format!("{name}.out"), cin, 1, 1)?);
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[SnConv] {
        &self.layers
    }

    pub fn forward_train(&mut self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut x = x.clone();
        for (i, l) in self.layers.iter_mut().enumerate() {
            x = l.forward_train(&x)?;
            if i < last {
                x = nn::leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }

    pub fn forward_frozen(&self, x: &Tensor) -> Result<Tensor> {
        let last = self.layers.len() - 1;
        let mut x = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward_frozen(&x)?;
            if i < last {
                x = nn::leaky_relu(&x, 0.2)?;
            }
        }
        Ok(x)
    }
}

/// One discriminator per scale in [`DISC_SCALES`]; inputs are bicubically
/// downsampled from the network resolution.
#[derive(Debug, Clone)]
pub struct DiscriminatorBank {
    params: ParamStore,
    discs: Vec<Discriminator>,
    resize: Vec<Option<TensorResize>>,
    resolution: usize,
    forced: Option<f64>,
}

impl DiscriminatorBank {
    pub fn new(resolution: usize, base_channels: usize, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if resolution % 8 != 0 || resolution < 16 || base_channels == 0 {
            return Err(Error::Config(format!(
                "discriminators need resolution divisible by 8 (got {resolution}) and positive width"
            )));
        }
        let mut params = ParamStore::new(dtype, device.clone());
        let mut init = Init::new(seed);
        let mut discs = Vec::with_capacity(4);
        let mut resize = Vec::with_capacity(4);
        for r in DISC_SCALES {
            discs.push(Discriminator::new(&mut params, &mut init, &format!("d{r}"), base_channels)?);
            let out = resolution / r;
            resize.push(if r == 1 {
                None
            } else {
                Some(TensorResize::new((resolution, resolution), (out, out), dtype, device)?)
            });
        }
        Ok(Self {
            params,
            discs,
            resize,
            resolution,
            forced: None,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn discriminators(&self) -> &[Discriminator] {
        &self.discs
    }

    /// Makes every score map the constant `v`; `None` restores the networks.
    pub fn force(&mut self, v: Option<f64>) {
        self.forced = v;
    }

    fn downsample(&self, images: &Tensor, i: usize) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h != self.resolution || w != self.resolution {
            return Err(Error::shape(format!(
                "discriminator input {h}x{w}, expected {0}x{0}",
                self.resolution
            )));
        }
        match &self.resize[i] {
            Some(r) => r.forward(images),
            None => Ok(images.clone()),
        }
    }

    fn apply_force(&self, s: Tensor) -> Result<Tensor> {
        Ok(match self.forced {
            Some(v) => s.ones_like()?.affine(v, 0.0)?,
            None => s,
        })
    }

    /// Patch score maps per scale; advances the power iterations.
    pub fn scores_train(&mut self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(4);
        for i in 0..DISC_SCALES.len() {
            let x = self.downsample(images, i)?;
            let s = self.discs[i].forward_train(&x)?;
            out.push(self.apply_force(s)?);
        }
        Ok(out)
    }

    /// Patch score maps with frozen discriminators.
    pub fn scores_frozen(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(4);
        for i in 0..DISC_SCALES.len() {
            let x = self.downsample(images, i)?;
            out.push(self.apply_force(self.discs[i].forward_frozen(&x)?)?);
        }
        Ok(out)
    }

    /// Power-iteration vectors, for checkpointing.
    pub fn state_tensors(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (r, d) in DISC_SCALES.iter().zip(&self.discs) {
            for (i, l) in d.layers.iter().enumerate() {
                out.push((format!("{prefix}d{r}.u{i}"), l.u.clone()));
            }
        }
        out
    }

    pub fn load_state(&mut self, source: &BTreeMap<String, Tensor>, prefix: &str) -> Result<()> {
        let dtype = self.params.dtype();
        for (r, d) in DISC_SCALES.iter().zip(self.discs.iter_mut()) {
            for (i, l) in d.layers.iter_mut().enumerate() {
                let key = format!("{prefix}d{r}.u{i}");
                let t = source
                    .get(&key)
                    .ok_or_else(|| Error::Validation(format!("checkpoint lacks {key}")))?;
                if t.dims() != l.u.dims() {
                    return Err(Error::Validation(format!("{key} has shape {:?}", t.dims())));
                }
                l.u = t.to_dtype(dtype)?;
            }
        }
        Ok(())
    }
}

fn check_scales(a: &[Tensor]) -> Result<()> {
    if a.len() != DISC_SCALES.len() {
        return Err(Error::shape(format!("expected {} score maps, got {}", DISC_SCALES.len(), a.len())));
    }
    Ok(())
}

/// `sum_r mean(relu(1 - real_r)) + mean(relu(1 + fake_r))`.
pub fn hinge_discriminator_loss(real: &[Tensor], fake: &[Tensor]) -> Result<Tensor> {
    check_scales(real)?;
    check_scales(fake)?;
    let mut total: Option<Tensor> = None;
    for (r, f) in real.iter().zip(fake) {
        let lr = r.affine(-1.0, 1.0)?.relu()?.mean_all()?;
        let lf = f.affine(1.0, 1.0)?.relu()?.mean_all()?;
        let t = (lr + lf)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    Ok(total.expect("non-empty"))
}

/// `-sum_r w_r * mean(fake_r)`.
pub fn hinge_generator_loss(fake: &[Tensor], weights: &LossWeights) -> Result<Tensor> {
    check_scales(fake)?;
    let mut total: Option<Tensor> = None;
    for (f, w) in fake.iter().zip(weights.adversarial) {
        let t = (f.mean_all()? * -w)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Discriminator objective on a real batch and a restored batch. The
/// restored batch is detached here.
pub fn discriminator_loss(bank: &mut DiscriminatorBank, real: &Tensor, restored: &Tensor) -> Result<Tensor> {
    let both = Tensor::cat(&[real, &restored.detach()], 0)?;
    let b = real.dims()[0];
    let scores = bank.scores_train(&both)?;
    let mut rs = Vec::with_capacity(4);
    let mut fs = Vec::with_capacity(4);
    for s in scores {
        rs.push(s.narrow(0, 0, b)?);
        fs.push(s.narrow(0, b, s.dims()[0] - b)?);
    }
    hinge_discriminator_loss(&rs, &fs)
}

/// Generator adversarial term; the discriminators are frozen.
pub fn generator_adv_loss(bank: &DiscriminatorBank, restored: &Tensor, weights: &LossWeights) -> Result<Tensor> {
    if !weights.adversarial_enabled() {
        return Ok(Tensor::zeros((), restored.dtype(), restored.device())?);
    }
    hinge_generator_loss(&bank.scores_frozen(restored)?, weights)
}

pub fn total_loss(rec: &Tensor, adv_g: &Tensor) -> Result<Tensor> {
    Ok((rec + adv_g)?)
}
