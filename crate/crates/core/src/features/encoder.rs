use std::path::Path;

use candle_core::{DType, Device, Tensor};
use sha2::{Digest, Sha256};

use super::{FeatureMap, NUM_SCALES};
use crate::config::parse_key_values;
use crate::error::{Error, Result};
use crate::nn::{self, blob, Conv2d, Init};

/// Four-stage VGG-style convolutional encoder layout. Stage `s` (1-based)
/// runs at `1 / 2^(s-1)` of the input resolution; stages after the first
/// start with a 2x2 max-pool.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub channels: [usize; 4],
    pub convs_per_stage: [usize; 4],
    /// 0 gives ReLU.
    pub leaky_slope: f64,
    pub input_mean: f64,
    pub input_scale: f64,
}

impl EncoderConfig {
    /// Small random encoder used for tests and desk-scale runs.
    pub fn toy() -> Self {
        Self {
            channels: [16, 32, 64, 128],
            convs_per_stage: [1, 1, 1, 1],
            leaky_slope: 0.2,
            input_mean: 0.5,
            input_scale: 0.5,
        }
    }

    /// Layout of the first four VGG-Face convolution stages
    /// (conv1_2, conv2_2, conv3_3, conv4_3 outputs).
    pub fn vgg_face() -> Self {
        Self {
            channels: [64, 128, 256, 512],
            convs_per_stage: [2, 2, 3, 3],
            leaky_slope: 0.0,
            input_mean: 0.5,
            input_scale: 0.5,
        }
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize; 4]| v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "encoder_channels={}\nencoder_convs={}\nencoder_leaky_slope={}\nencoder_input_mean={}\nencoder_input_scale={}\n",
            list(&self.channels),
            list(&self.convs_per_stage),
            self.leaky_slope,
            self.input_mean,
            self.input_scale
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).ok_or_else(|| Error::Config(format!("encoder config lacks {k}")));
        let list = |k: &str| -> Result<[usize; 4]> {
            let v: Vec<usize> = get(k)?
                .split(',')
                .map(|s| s.trim().parse().map_err(|_| Error::Config(format!("bad {k}"))))
                .collect::<Result<_>>()?;
            v.try_into().map_err(|_| Error::Config(format!("{k} needs four entries")))
        };
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Config(format!("bad {k}"))) };
        Ok(Self {
            channels: list("encoder_channels")?,
            convs_per_stage: list("encoder_convs")?,
            leaky_slope: num("encoder_leaky_slope")?,
            input_mean: num("encoder_input_mean")?,
            input_scale: num("encoder_input_scale")?,
        })
    }
}

/// Frozen feature extractor shared by dictionary construction, the
/// restoration network and the perceptual loss. Its weights are plain
/// tensors, never registered for training.
#[derive(Debug, Clone)]
pub struct Encoder {
    config: EncoderConfig,
    stages: Vec<Vec<Conv2d>>,
    hash: String,
}

fn weight_name(stage: usize, conv: usize, what: &str) -> String {
    format!("stage{}.conv{}.{what}", stage + 1, conv + 1)
}

impl Encoder {
    /// Randomly initialized then frozen encoder.
    pub fn random(config: EncoderConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut named = Vec::new();
        let mut cin = 3;
        for (s, (&cout, &n)) in config.channels.iter().zip(&config.convs_per_stage).enumerate() {
            for i in 0..n {
                let c_in = if i == 0 { cin } else { cout };
                named.push((weight_name(s, i, "weight"), init.conv_weight(cout, c_in, 3, 1.0, DType::F64, device)?));
                named.push((weight_name(s, i, "bias"), init.normal(&[cout], 0.01, DType::F64, device)?));
            }
            cin = cout;
        }
        Self::from_named(config, &named.into_iter().collect(), dtype)
    }

    fn from_named(
        config: EncoderConfig,
        named: &std::collections::BTreeMap<String, Tensor>,
        dtype: DType,
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(NUM_SCALES);
        let mut cin = 3;
        let mut hashed = Vec::new();
        for (s, (&cout, &n)) in config.channels.iter().zip(&config.convs_per_stage).enumerate() {
            if n == 0 {
                return Err(Error::Config("every encoder stage needs at least one convolution".into()));
            }
            let mut convs = Vec::with_capacity(n);
            for i in 0..n {
                let c_in = if i == 0 { cin } else { cout };
                let fetch = |what: &str, dims: &[usize]| -> Result<Tensor> {
                    let key = weight_name(s, i, what);
                    let t = named
                        .get(&key)
                        .ok_or_else(|| Error::Validation(format!("encoder weights lack {key}")))?;
                    if t.dims() != dims {
                        return Err(Error::Validation(format!("encoder weight {key} has shape {:?}", t.dims())));
                    }
                    Ok(t.to_dtype(DType::F32)?)
                };
                let w = fetch("weight", &[cout, c_in, 3, 3])?;
                let b = fetch("bias", &[cout])?;
                hashed.push((weight_name(s, i, "weight"), w.clone()));
                hashed.push((weight_name(s, i, "bias"), b.clone()));
                convs.push(Conv2d {
                    weight: w.to_dtype(dtype)?.detach(),
                    bias: b.to_dtype(dtype)?.detach(),
                    stride: 1,
                    padding: 1,
                });
            }
            stages.push(convs);
            cin = cout;
        }
        let bytes = blob::encode(&config.to_text(), &hashed)?;
        let hash = hex::encode(Sha256::digest(&bytes));
        Ok(Self { config, stages, hash })
    }

    pub fn load(path: impl AsRef<Path>, dtype: DType, device: &Device) -> Result<Self> {
        let file = blob::load(path, device)?;
        let config = EncoderConfig::from_text(&file.text)?;
        Self::from_named(config, &file.tensors, dtype)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        blob::save(path, &self.config.to_text(), &self.named_tensors("")?)
    }

    pub fn named_tensors(&self, prefix: &str) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::new();
        for (s, convs) in self.stages.iter().enumerate() {
            for (i, c) in convs.iter().enumerate() {
                out.push((format!("{prefix}{}", weight_name(s, i, "weight")), c.weight.to_dtype(DType::F32)?));
                out.push((format!("{prefix}{}", weight_name(s, i, "bias")), c.bias.to_dtype(DType::F32)?));
            }
        }
        Ok(out)
    }

    /// Rebuilds an encoder from tensors previously produced by [`Encoder::named_tensors`].
    pub fn from_tensors(
        config: EncoderConfig,
        named: &std::collections::BTreeMap<String, Tensor>,
        prefix: &str,
        dtype: DType,
    ) -> Result<Self> {
        let stripped = named
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|k| (k.to_string(), v.clone())))
            .collect();
        Self::from_named(config, &stripped, dtype)
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// SHA-256 of the configuration and f32 weights.
    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn channels(&self, scale: usize) -> usize {
        self.config.channels[scale - 1]
    }

    pub fn dtype(&self) -> DType {
        self.stages[0][0].weight.dtype()
    }

    /// Per-scale activations of a `(B, 3, H, W)` batch. Differentiable with
    /// respect to the input, which the perceptual loss relies on.
    pub fn forward(&self, images: &Tensor) -> Result<[Tensor; 4]> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("encoder expects 3 input channels, got {c}")));
        }
        let div = 1 << (NUM_SCALES - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape(format!("encoder input {h}x{w} must be divisible by {div}")));
        }
        let mut x = images.affine(1.0 / self.config.input_scale, -self.config.input_mean / self.config.input_scale)?;
        let mut outs = Vec::with_capacity(NUM_SCALES);
        for (s, convs) in self.stages.iter().enumerate() {
            if s > 0 {
                x = x.max_pool2d(2)?;
            }
            for conv in convs {
                x = nn::leaky_relu(&conv.forward(&x)?, self.config.leaky_slope)?;
            }
            outs.push(x.clone());
        }
        Ok(outs.try_into().expect("four stages"))
    }
}

/// Four feature maps of `images` at the configured `resolution`.
pub fn extract_features(images: &Tensor, encoder: &Encoder, resolution: usize) -> Result<[FeatureMap; 4]> {
    let (_, _, h, w) = images.dims4()?;
    if h != resolution || w != resolution {
        return Err(Error::shape(format!(
            "input is {h}x{w}, model resolution is {resolution}x{resolution}"
        )));
    }
    let [a, b, c, d] = encoder.forward(images)?;
    Ok([
        FeatureMap { scale: 1, data: a },
        FeatureMap { scale: 2, data: b },
        FeatureMap { scale: 3, data: c },
        FeatureMap { scale: 4, data: d },
    ])
}
