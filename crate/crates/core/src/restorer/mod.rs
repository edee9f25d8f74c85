//! The restoration generator: frozen encoder, per-scale DFT blocks and an
//! SFT-modulated decoder.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::config::parse_key_values;
use crate::dft::{dft_block, ComponentBoxes, ConfidenceParams, DftDiagnostics, DftOptions, MatchMode};
use crate::dictionary::DictionarySet;
use crate::error::{Error, Result};
use crate::features::{component_roi, Component, Encoder, EncoderConfig, FeatureMap, NUM_SCALES};
use crate::imaging::{resize_bicubic, Image};
use crate::landmarks::LandmarkSet;
use crate::nn::{self, blob, Conv2d, Init, ParamStore};

pub const SUPPORTED_RESOLUTIONS: [usize; 4] = [32, 64, 128, 256];

/// Keeps the input-skip logit finite for pixels at exactly 0 or 1.
const SKIP_CLAMP: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    pub resolution: usize,
    /// Decoder widths per scale; `None` mirrors the encoder.
    pub decoder_channels: Option<[usize; 4]>,
    /// 0, 2 (scales 3 and 4) or 4.
    pub dft_blocks: usize,
    pub dft: DftOptions,
    /// Add the decoder output to the input in logit space before the final
    /// bounded activation, so an untrained network starts near identity.
    pub input_skip: bool,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            decoder_channels: None,
            dft_blocks: 4,
            dft: DftOptions::default(),
            input_skip: true,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_RESOLUTIONS.contains(&self.resolution) {
            return Err(Error::Config(format!(
                "resolution {} not in {SUPPORTED_RESOLUTIONS:?}",
                self.resolution
            )));
        }
        if ![0, 2, 4].contains(&self.dft_blocks) {
            return Err(Error::Config(format!("dft_blocks must be 0, 2 or 4, got {}", self.dft_blocks)));
        }
        if let Some(ch) = self.decoder_channels {
            if ch.contains(&0) {
                return Err(Error::Config("decoder channels must be positive".into()));
            }
        }
        Ok(())
    }

    /// Whether scale `s` runs a DFT block.
    pub fn uses_dft(&self, scale: usize) -> bool {
        scale + self.dft_blocks > NUM_SCALES
    }

    pub fn to_text(&self) -> String {
        let mut t = String::new();
        writeln!(t, "resolution={}", self.resolution).unwrap();
        if let Some(ch) = self.decoder_channels {
            writeln!(t, "decoder_channels={}", ch.map(|c| c.to_string()).join(",")).unwrap();
        }
        writeln!(t, "dft_blocks={}", self.dft_blocks).unwrap();
        writeln!(t, "use_cadain={}", self.dft.use_cadain).unwrap();
        writeln!(t, "use_confidence={}", self.dft.use_confidence).unwrap();
        writeln!(t, "match_mode={}", self.dft.match_mode).unwrap();
        writeln!(t, "input_skip={}", self.input_skip).unwrap();
        writeln!(t, "generator_seed={}", self.seed).unwrap();
        t
    }

    /// Reads the keys written by [`GeneratorConfig::to_text`]; absent keys keep defaults.
    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self::default();
        let bad = |k: &str, v: &str| Error::Config(format!("bad value for {k}: {v}"));
        for (k, v) in kv {
            match k.as_str() {
                "resolution" => c.resolution = v.parse().map_err(|_| bad(k, v))?,
                "decoder_channels" => {
                    let list: Vec<usize> = v
                        .split(',')
                        .map(|x| x.trim().parse().map_err(|_| bad(k, v)))
                        .collect::<Result<_>>()?;
                    c.decoder_channels = Some(list.try_into().map_err(|_| bad(k, v))?);
                }
                "dft_blocks" => c.dft_blocks = v.parse().map_err(|_| bad(k, v))?,
                "use_cadain" => c.dft.use_cadain = v.parse().map_err(|_| bad(k, v))?,
                "use_confidence" => c.dft.use_confidence = v.parse().map_err(|_| bad(k, v))?,
                "match_mode" => c.dft.match_mode = v.parse::<MatchMode>()?,
                "input_skip" => c.input_skip = v.parse().map_err(|_| bad(k, v))?,
                "generator_seed" => c.seed = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }
}

/// Spatial feature transform: `alpha * x + beta`, with `alpha` and `beta`
/// each predicted from the condition by two 3x3 convolutions.
#[derive(Debug, Clone)]
pub struct Sft {
    alpha: [Conv2d; 2],
    beta: [Conv2d; 2],
    forced_alpha: Option<f64>,
    forced_beta: Option<f64>,
}

impl Sft {
    /// The second convolutions start with small weights and bias 1 (alpha)
    /// or 0 (beta), so the layer begins close to the identity.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cond_channels: usize, channels: usize) -> Result<Self> {
        let alpha = [
            Conv2d::new(store, init, &format!("{name}.alpha1"), cond_channels, cond_channels, 3, 1, 1.0)?,
            Conv2d::new(store, init, &format!("{name}.alpha2"), cond_channels, channels, 3, 1, 0.05)?,
        ];
        let beta = [
            Conv2d::new(store, init, &format!("{name}.beta1"), cond_channels, cond_channels, 3, 1, 1.0)?,
            Conv2d::new(store, init, &format!("{name}.beta2"), cond_channels, channels, 3, 1, 0.05)?,
        ];
        let ones = alpha[1].bias.ones_like()?;
        store
            .get(&format!("{name}.alpha2.bias"))
            .expect("just inserted")
            .set(&ones)?;
        Ok(Self {
            alpha,
            beta,
            forced_alpha: None,
            forced_beta: None,
        })
    }

    /// Pins alpha to a constant; `None` restores the learned map.
    pub fn force_alpha(&mut self, value: Option<f64>) {
        self.forced_alpha = value;
    }

    pub fn force_beta(&mut self, value: Option<f64>) {
        self.forced_beta = value;
    }

    /// alpha = 1, beta = 0.
    pub fn force_identity(&mut self) {
        self.force_alpha(Some(1.0));
        self.force_beta(Some(0.0));
    }

    pub fn modulation(&self, cond: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, _, h, w) = cond.dims4()?;
        let out_c = self.alpha[1].out_channels();
        let branch = |convs: &[Conv2d; 2], forced: Option<f64>| -> Result<Tensor> {
            if let Some(v) = forced {
                return Ok((Tensor::zeros((b, out_c, h, w), cond.dtype(), cond.device())? + v)?);
            }
            let x = nn::leaky_relu(&convs[0].forward(cond)?, 0.2)?;
            convs[1].forward(&x)
        };
        Ok((branch(&self.alpha, self.forced_alpha)?, branch(&self.beta, self.forced_beta)?))
    }

    pub fn forward(&self, x: &FeatureMap, cond: &FeatureMap) -> Result<FeatureMap> {
        if x.scale != cond.scale {
            return Err(Error::shape(format!("SFT at scale {} conditioned on scale {}", x.scale, cond.scale)));
        }
        let (xb, xc, xh, xw) = x.dims();
        let (cb, _, ch, cw) = cond.dims();
        if (xb, xh, xw) != (cb, ch, cw) || xc != self.alpha[1].out_channels() {
            return Err(Error::shape(format!(
                "SFT features {:?} do not align with condition {:?}",
                x.data.dims(),
                cond.data.dims()
            )));
        }
        let (a, b) = self.modulation(&cond.data)?;
        Ok(FeatureMap {
            scale: x.scale,
            data: ((&x.data * &a)? + &b)?,
        })
    }
}

/// Generator weights plus the frozen encoder they were built around.
/// Clones share parameter storage.
#[derive(Debug, Clone)]
pub struct Generator {
    config: GeneratorConfig,
    encoder: Encoder,
    params: ParamStore,
    conv_in: Conv2d,
    /// Decoder conv entering scale `s` from `s + 1`, for s = 3, 2, 1.
    up: [Conv2d; 3],
    sft: [Sft; 4],
    confidence: [Option<ConfidenceParams>; 4],
    conv_out: Conv2d,
}

/// What [`Generator::forward`] returns besides the image batch.
#[derive(Debug, Clone, Default)]
pub struct ForwardDiagnostics {
    /// One entry per DFT block, deepest first.
    pub blocks: Vec<DftDiagnostics>,
}

pub fn build_generator(config: GeneratorConfig, encoder: Encoder) -> Result<Generator> {
    Generator::new(config, encoder)
}

impl Generator {
    pub fn new(config: GeneratorConfig, encoder: Encoder) -> Result<Self> {
        config.validate()?;
        let dtype = encoder.dtype();
        let enc_ch: [usize; 4] = std::array::from_fn(|i| encoder.channels(i + 1));
        let dec = config.decoder_channels.unwrap_or(enc_ch);
        let mut params = ParamStore::new(dtype, Device::Cpu);
        let mut init = Init::new(config.seed);
        let conv_in = Conv2d::new(&mut params, &mut init, "dec.conv_in", enc_ch[3], dec[3], 3, 1, 1.0)?;
        let up = [
            Conv2d::new(&mut params, &mut init, "dec.up3", dec[3], dec[2], 3, 1, 1.0)?,
            Conv2d::new(&mut params, &mut init, "dec.up2", dec[2], dec[1], 3, 1, 1.0)?,
            Conv2d::new(&mut params, &mut init, "dec.up1", dec[1], dec[0], 3, 1, 1.0)?,
        ];
        let mut sfts = Vec::with_capacity(4);
        for s in 1..=4 {
            sfts.push(Sft::new(&mut params, &mut init, &format!("sft{s}"), enc_ch[s - 1], dec[s - 1])?);
        }
        let mut confidence: [Option<ConfidenceParams>; 4] = Default::default();
        for s in 1..=4 {
            if config.uses_dft(s) && config.dft.use_confidence {
                confidence[s - 1] = Some(ConfidenceParams::new(&mut params, &mut init, &format!("conf{s}"), enc_ch[s - 1])?);
            }
        }
        let conv_out = Conv2d::new(&mut params, &mut init, "dec.conv_out", dec[0], 3, 3, 1, 0.1)?;
        Ok(Self {
            config,
            encoder,
            params,
            conv_in,
            up,
            sft: sfts.try_into().expect("four scales"),
            confidence,
            conv_out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Trainable parameters; the encoder is not among them.
    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn sft_mut(&mut self, scale: usize) -> &mut Sft {
        &mut self.sft[scale - 1]
    }

    pub fn confidence_mut(&mut self, scale: usize) -> Option<&mut ConfidenceParams> {
        self.confidence[scale - 1].as_mut()
    }

    /// Fails unless `dicts` were built with this generator's encoder at its resolution.
    pub fn check_dictionary(&self, dicts: &DictionarySet) -> Result<()> {
        if dicts.encoder_hash() != self.encoder.hash() {
            return Err(Error::Config(format!(
                "dictionary encoder hash {} does not match model encoder {}",
                dicts.encoder_hash(),
                self.encoder.hash()
            )));
        }
        if dicts.manifest().resolution != self.config.resolution {
            return Err(Error::Config(format!(
                "dictionary built at {}px, model runs at {}px",
                dicts.manifest().resolution,
                self.config.resolution
            )));
        }
        Ok(())
    }

    /// Restores a `(B, 3, R, R)` batch in [0, 1]. `boxes` holds the
    /// component boxes of each item in image pixels. `dicts` may be `None`
    /// only when the model has no DFT blocks.
    pub fn forward(
        &self,
        images: &Tensor,
        boxes: &[ComponentBoxes],
        dicts: Option<&DictionarySet>,
    ) -> Result<(Tensor, ForwardDiagnostics)> {
        let r = self.config.resolution;
        let (b, c, h, w) = images.dims4()?;
        if c != 3 || h != r || w != r {
            return Err(Error::shape(format!("generator expects (B, 3, {r}, {r}), got {:?}", images.dims())));
        }
        let feats = self.encoder.forward(images)?;
        let mut restored: Vec<FeatureMap> = feats
            .into_iter()
            .enumerate()
            .map(|(i, t)| FeatureMap { scale: i + 1, data: t })
            .collect();
        let mut diag = ForwardDiagnostics::default();
        if self.config.dft_blocks > 0 {
            let dicts = dicts.ok_or_else(|| Error::Config("model has DFT blocks but no dictionary was given".into()))?;
            self.check_dictionary(dicts)?;
            if boxes.len() != b {
                return Err(Error::shape(format!("{} box sets for a batch of {b}", boxes.len())));
            }
            for s in (1..=NUM_SCALES).rev().filter(|&s| self.config.uses_dft(s)) {
                let conf = self.confidence[s - 1].as_ref();
                let (out, d) = dft_block(&restored[s - 1], boxes, dicts, conf, &self.config.dft)?;
                restored[s - 1] = out;
                diag.blocks.push(d);
            }
        }
        let mut x = FeatureMap {
            scale: 4,
            data: nn::leaky_relu(&self.conv_in.forward(&restored[3].data)?, 0.2)?,
        };
        x = self.sft[3].forward(&x, &restored[3])?;
        for (i, s) in [3usize, 2, 1].into_iter().enumerate() {
            let up = nn::upsample2x(&x.data)?;
            let y = FeatureMap {
                scale: s,
                data: nn::leaky_relu(&self.up[i].forward(&up)?, 0.2)?,
            };
            x = self.sft[s - 1].forward(&y, &restored[s - 1])?;
        }
        let mut logits = self.conv_out.forward(&x.data)?;
        if self.config.input_skip {
            // atanh(2p - 1) is the pre-activation giving back p
            let p = images.clamp(SKIP_CLAMP, 1.0 - SKIP_CLAMP)?.detach();
            let t = p.affine(2.0, -1.0)?;
            let atanh = ((t.affine(1.0, 1.0)?.log()? - t.affine(-1.0, 1.0)?.log()?)? * 0.5)?;
            logits = (logits + atanh)?;
        }
        let out = logits.tanh()?.affine(0.5, 0.5)?;
        Ok((out, diag))
    }

    /// Checkpoint text: generator and encoder configuration.
    pub fn config_text(&self) -> String {
        format!("{}{}encoder_hash={}\n", self.config.to_text(), self.encoder.config().to_text(), self.encoder.hash())
    }

    /// Trainable weights under `g.` and encoder weights under `enc.`.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = self.params.named_tensors("g.");
        out.extend(self.encoder.named_tensors("enc.")?);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        blob::save(path, &self.config_text(), &self.named_tensors()?)
    }

    /// Rebuilds a generator (with its encoder) from checkpoint contents.
    pub fn from_blob(file: &blob::BlobFile, dtype: DType) -> Result<Self> {
        let kv = parse_key_values(&file.text)?;
        let config = GeneratorConfig::from_map(&kv)?;
        let enc_cfg = EncoderConfig::from_text(&file.text)?;
        let encoder = Encoder::from_tensors(enc_cfg, &file.tensors, "enc.", dtype)?;
        if let Some(h) = kv.get("encoder_hash") {
            if h != encoder.hash() {
                return Err(Error::Validation(format!("checkpoint encoder hash {h} does not match its weights")));
            }
        }
        let g = Self::new(config, encoder)?;
        g.params.load(&file.tensors, "g.")?;
        Ok(g)
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<Self> {
        Self::from_blob(&blob::load(path, &Device::Cpu)?, dtype)
    }
}

/// Component boxes for one face at `resolution`; a degenerate component is
/// dropped (and later passed through) with a warning.
pub fn face_boxes(landmarks: &LandmarkSet, resolution: usize) -> ComponentBoxes {
    Component::ALL.map(|c| match component_roi(landmarks, c, (resolution, resolution)) {
        Ok(b) => Some(b),
        Err(e) => {
            log::warn!("{e}; component left untouched");
            None
        }
    })
}

#[derive(Debug, Clone)]
pub struct ComponentDiagnostic {
    pub scale: usize,
    pub component: Component,
    pub k_star: Option<usize>,
    pub mean_confidence: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RestorationOutput {
    pub image: Image,
    pub diagnostics: Vec<ComponentDiagnostic>,
}

/// Restores one degraded face. The image is bicubically resampled to the
/// model resolution (landmarks are scaled along with it) when needed.
pub fn restore(
    degraded: &Image,
    landmarks: &LandmarkSet,
    dicts: Option<&DictionarySet>,
    generator: &Generator,
) -> Result<RestorationOutput> {
    let r = generator.config().resolution;
    if let Some(d) = dicts {
        generator.check_dictionary(d)?;
    }
    let (img, lm) = if degraded.height() != r || degraded.width() != r {
        if degraded.height() != degraded.width() {
            return Err(Error::shape(format!(
                "input {}x{} is not square",
                degraded.height(),
                degraded.width()
            )));
        }
        let f = r as f64 / degraded.width() as f64;
        (resize_bicubic(degraded, r, r), landmarks.scaled(f))
    } else {
        (degraded.clone(), landmarks.clone())
    };
    let x = img.to_tensor(generator.dtype(), &Device::Cpu)?;
    let boxes = [face_boxes(&lm, r)];
    let (out, diag) = generator.forward(&x, &boxes, dicts)?;
    let mut diagnostics = Vec::new();
    for block in &diag.blocks {
        for c in Component::ALL {
            diagnostics.push(ComponentDiagnostic {
                scale: block.scale,
                component: c,
                k_star: block.k_star[c.index()][0],
                mean_confidence: block.mean_confidence[c.index()][0],
            });
        }
    }
    Ok(RestorationOutput {
        image: Image::from_tensor(&out, 0)?,
        diagnostics,
    })
}
