//! Alternating discriminator / generator training.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use rand::{seq::index, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pairs::Pair;
use crate::config::parse_key_values;
use crate::dictionary::DictionarySet;
use crate::dft::ComponentBoxes;
use crate::error::{Error, Result};
use crate::features::Encoder;
use crate::nn::{blob, scalar, Adam};
use crate::objectives::{
    discriminator_loss, generator_adv_loss, reconstruction_loss, total_loss, DiscriminatorBank, LossWeights,
};
use crate::restorer::{face_boxes, Generator, GeneratorConfig};

pub const LOG_HEADER: &str = "step,loss_rec,loss_adv_g,loss_d,lr";
pub const LOG_FILE: &str = "train_log.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.dfdc";
pub const CONFIG_SNAPSHOT: &str = "config.txt";

const TRAINER_KEYS: [&str; 12] = [
    "batch_size",
    "lr",
    "beta1",
    "beta2",
    "lr_patience",
    "eval_every",
    "max_steps",
    "checkpoint_every",
    "val_count",
    "disc_channels",
    "disc_seed",
    "data_seed",
];
const GENERATOR_KEYS: [&str; 8] = [
    "resolution",
    "decoder_channels",
    "dft_blocks",
    "use_cadain",
    "use_confidence",
    "match_mode",
    "input_skip",
    "generator_seed",
];
const LOSS_KEYS: [&str; 4] = ["lambda_l2", "lambda_p", "lambda_a", "pixel_loss_reduction"];

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub generator: GeneratorConfig,
    pub weights: LossWeights,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Non-improving validations tolerated before the learning rate halves.
    pub lr_patience: usize,
    /// Steps between validations; 0 disables the schedule.
    pub eval_every: u64,
    pub max_steps: u64,
    /// Steps between checkpoints; 0 only checkpoints at the end of a run.
    pub checkpoint_every: u64,
    pub val_count: usize,
    pub disc_channels: usize,
    pub disc_seed: u64,
    pub data_seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            weights: LossWeights::default(),
            batch_size: 8,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            lr_patience: 2,
            eval_every: 500,
            max_steps: 100_000,
            checkpoint_every: 1000,
            val_count: 32,
            disc_channels: 32,
            disc_seed: 1,
            data_seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        self.generator.validate()?;
        self.weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.lr_patience < 1 {
            return Err(Error::Config("lr_patience must be >= 1".into()));
        }
        if self.batch_size == 0 || self.disc_channels == 0 {
            return Err(Error::Config("batch_size and disc_channels must be positive".into()));
        }
        for b in [self.beta1, self.beta2] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("Adam betas must lie in [0, 1), got {b}")));
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut t = self.generator.to_text();
        t.push_str(&self.weights.to_text());
        writeln!(t, "batch_size={}", self.batch_size).unwrap();
        writeln!(t, "lr={:e}", self.lr).unwrap();
        writeln!(t, "beta1={}", self.beta1).unwrap();
        writeln!(t, "beta2={}", self.beta2).unwrap();
        writeln!(t, "lr_patience={}", self.lr_patience).unwrap();
        writeln!(t, "eval_every={}", self.eval_every).unwrap();
        writeln!(t, "max_steps={}", self.max_steps).unwrap();
        writeln!(t, "checkpoint_every={}", self.checkpoint_every).unwrap();
        writeln!(t, "val_count={}", self.val_count).unwrap();
        writeln!(t, "disc_channels={}", self.disc_channels).unwrap();
        writeln!(t, "disc_seed={}", self.disc_seed).unwrap();
        writeln!(t, "data_seed={}", self.data_seed).unwrap();
        t
    }

    /// Reads a user config file; unknown keys are rejected.
    pub fn from_text(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        for k in kv.keys() {
            let known = TRAINER_KEYS.contains(&k.as_str())
                || GENERATOR_KEYS.contains(&k.as_str())
                || LOSS_KEYS.contains(&k.as_str());
            if !known {
                return Err(Error::Config(format!("unknown training config key {k:?}")));
            }
        }
        Self::from_map(&kv)
    }

    /// As [`TrainingConfig::from_text`] but ignores keys it does not know.
    pub fn from_map(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self {
            generator: GeneratorConfig::from_map(kv)?,
            weights: LossWeights::from_map(kv)?,
            ..Self::default()
        };
        let bad = |k: &str, v: &str| Error::Config(format!("bad value for {k}: {v}"));
        for (k, v) in kv {
            match k.as_str() {
                "batch_size" => c.batch_size = v.parse().map_err(|_| bad(k, v))?,
                "lr" => c.lr = v.parse().map_err(|_| bad(k, v))?,
                "beta1" => c.beta1 = v.parse().map_err(|_| bad(k, v))?,
                "beta2" => c.beta2 = v.parse().map_err(|_| bad(k, v))?,
                "lr_patience" => c.lr_patience = v.parse().map_err(|_| bad(k, v))?,
                "eval_every" => c.eval_every = v.parse().map_err(|_| bad(k, v))?,
                "max_steps" => c.max_steps = v.parse().map_err(|_| bad(k, v))?,
                "checkpoint_every" => c.checkpoint_every = v.parse().map_err(|_| bad(k, v))?,
                "val_count" => c.val_count = v.parse().map_err(|_| bad(k, v))?,
                "disc_channels" => c.disc_channels = v.parse().map_err(|_| bad(k, v))?,
                "disc_seed" => c.disc_seed = v.parse().map_err(|_| bad(k, v))?,
                "data_seed" => c.data_seed = v.parse().map_err(|_| bad(k, v))?,
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: u64,
    pub loss_rec: f64,
    pub loss_adv_g: f64,
    pub loss_d: f64,
    pub lr: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:e}",
            self.step, self.loss_rec, self.loss_adv_g, self.loss_d, self.lr
        )
    }
}

/// Pairs as network-ready tensors plus component boxes.
#[derive(Debug, Clone)]
struct Prepared {
    lq: Vec<Tensor>,
    hq: Vec<Tensor>,
    boxes: Vec<ComponentBoxes>,
}

impl Prepared {
    fn new(pairs: &[Pair], resolution: usize, dtype: DType) -> Result<Self> {
        let mut p = Self {
            lq: Vec::with_capacity(pairs.len()),
            hq: Vec::with_capacity(pairs.len()),
            boxes: Vec::with_capacity(pairs.len()),
        };
        for pair in pairs {
            for img in [&pair.hq, &pair.lq] {
                if img.height() != resolution || img.width() != resolution {
                    return Err(Error::shape(format!(
                        "pair {} is {}x{}, model resolution is {resolution}",
                        pair.id,
                        img.height(),
                        img.width()
                    )));
                }
            }
            p.lq.push(pair.lq.to_tensor(dtype, &Device::Cpu)?);
            p.hq.push(pair.hq.to_tensor(dtype, &Device::Cpu)?);
            p.boxes.push(face_boxes(&pair.landmarks, resolution));
        }
        Ok(p)
    }

    fn len(&self) -> usize {
        self.lq.len()
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor, Vec<ComponentBoxes>)> {
        let lq: Vec<&Tensor> = idx.iter().map(|&i| &self.lq[i]).collect();
        let hq: Vec<&Tensor> = idx.iter().map(|&i| &self.hq[i]).collect();
        Ok((
            Tensor::cat(&lq, 0)?,
            Tensor::cat(&hq, 0)?,
            idx.iter().map(|&i| self.boxes[i]).collect(),
        ))
    }
}

/// Splits off the last `val_count` pairs (at most half the set) for validation.
pub fn split_validation(mut pairs: Vec<Pair>, val_count: usize) -> (Vec<Pair>, Vec<Pair>) {
    let n = val_count.min(pairs.len() / 2);
    let val = pairs.split_off(pairs.len() - n);
    (pairs, val)
}

/// Owns the generator, the discriminators and both optimizers. All
/// randomness comes from config seeds; batch `t` is drawn from a stream
/// keyed by `(data_seed, t)`, so resumed runs see the same batches.
pub struct Trainer {
    config: TrainingConfig,
    generator: Generator,
    disc: DiscriminatorBank,
    dicts: Option<DictionarySet>,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    best_val: Option<f64>,
    stale_evals: usize,
    train: Prepared,
    val: Prepared,
    log: Vec<LogRow>,
    flushed: usize,
    out_dir: Option<PathBuf>,
}

const DTYPE: DType = DType::F32;

impl Trainer {
    pub fn new(
        config: TrainingConfig,
        encoder: Encoder,
        dicts: Option<DictionarySet>,
        train: &[Pair],
        val: &[Pair],
    ) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator.clone(), encoder)?;
        let disc = DiscriminatorBank::new(
            config.generator.resolution,
            config.disc_channels,
            config.disc_seed,
            DTYPE,
            &Device::Cpu,
        )?;
        Self::assemble(config, generator, disc, dicts, train, val)
    }

    fn assemble(
        config: TrainingConfig,
        generator: Generator,
        disc: DiscriminatorBank,
        dicts: Option<DictionarySet>,
        train: &[Pair],
        val: &[Pair],
    ) -> Result<Self> {
        if config.generator.dft_blocks > 0 {
            let d = dicts
                .as_ref()
                .ok_or_else(|| Error::Config("model has DFT blocks but no dictionary was given".into()))?;
            generator.check_dictionary(d)?;
        }
        if train.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let r = config.generator.resolution;
        Ok(Self {
            opt_g: Adam::new(config.lr, config.beta1, config.beta2),
            opt_d: Adam::new(config.lr, config.beta1, config.beta2),
            train: Prepared::new(train, r, DTYPE)?,
            val: Prepared::new(val, r, DTYPE)?,
            config,
            generator,
            disc,
            dicts,
            step: 0,
            best_val: None,
            stale_evals: 0,
            log: Vec::new(),
            flushed: 0,
            out_dir: None,
        })
    }

    /// Checkpoints, the config snapshot and the CSV log go to `dir`.
    pub fn set_output_dir(&mut self, dir: impl Into<PathBuf>) -> Result<()> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        blob::write_atomic(&dir.join(CONFIG_SNAPSHOT), self.config.to_text().as_bytes())?;
        self.out_dir = Some(dir);
        Ok(())
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn discriminators(&self) -> &DiscriminatorBank {
        &self.disc
    }

    pub fn dictionary(&self) -> Option<&DictionarySet> {
        self.dicts.as_ref()
    }

    /// Extends (or shortens) the run, e.g. after [`Trainer::resume`].
    pub fn set_max_steps(&mut self, steps: u64) {
        self.config.max_steps = steps;
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    pub fn lr(&self) -> f64 {
        self.opt_g.lr
    }

    pub fn log(&self) -> &[LogRow] {
        &self.log
    }

    fn batch_indices(&self, step: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.data_seed ^ step.wrapping_mul(0xd134_2543_de82_ef95));
        let n = self.train.len();
        let b = self.config.batch_size;
        if b <= n {
            index::sample(&mut rng, n, b).into_vec()
        } else {
            (0..b).map(|_| rng.gen_range(0..n)).collect()
        }
    }

    /// One discriminator update followed by one generator update.
    pub fn step(&mut self) -> Result<LogRow> {
        let next = self.step + 1;
        let idx = self.batch_indices(next);
        let (lq, hq, boxes) = self.train.batch(&idx)?;
        let (out, _) = self.generator.forward(&lq, &boxes, self.dicts.as_ref())?;
        let weights = &self.config.weights;

        let loss_d = if weights.adversarial_enabled() {
            let d = discriminator_loss(&mut self.disc, &hq, &out)?;
            let v = scalar(&d)?;
            if !v.is_finite() {
                return Err(Error::NonFinite { step: next });
            }
            let grads = d.backward()?;
            self.opt_d.step(self.disc.params(), &grads)?;
            v
        } else {
            0.0
        };

        let rec = reconstruction_loss(&out, &hq, self.generator.encoder(), weights)?;
        let adv = generator_adv_loss(&self.disc, &out, weights)?;
        let total = total_loss(&rec.total, &adv)?;
        let (loss_rec, loss_adv_g) = (scalar(&rec.total)?, scalar(&adv)?);
        if !(loss_rec.is_finite() && loss_adv_g.is_finite()) {
            return Err(Error::NonFinite { step: next });
        }
        let grads = total.backward()?;
        self.opt_g.step(self.generator.params(), &grads)?;
        if !self.generator.params().all_finite()? {
            return Err(Error::NonFinite { step: next });
        }
        self.step = next;
        let row = LogRow {
            step: next,
            loss_rec,
            loss_adv_g,
            loss_d,
            lr: self.opt_g.lr,
        };
        self.log.push(row);

        if self.config.eval_every > 0 && next % self.config.eval_every == 0 && self.val.len() > 0 {
            let v = self.validation_loss()?;
            log::info!("step {next}: validation reconstruction loss {v:.6}");
            self.observe_validation(v);
        }
        if self.config.checkpoint_every > 0 && next % self.config.checkpoint_every == 0 {
            self.checkpoint()?;
        }
        Ok(row)
    }

    /// Runs until `max_steps`, then writes a final checkpoint. A non-finite
    /// loss aborts the run; the last checkpoint on disk is left as it was.
    pub fn run(&mut self) -> Result<()> {
        while self.step < self.config.max_steps {
            let row = self.step()?;
            if row.step % 100 == 0 {
                log::info!(
                    "step {} rec {:.5} adv_g {:.5} d {:.5} lr {:e}",
                    row.step,
                    row.loss_rec,
                    row.loss_adv_g,
                    row.loss_d,
                    row.lr
                );
            }
        }
        self.checkpoint()
    }

    /// Mean reconstruction loss over the validation pairs.
    pub fn validation_loss(&self) -> Result<f64> {
        let n = self.val.len();
        if n == 0 {
            return Err(Error::Data("no validation pairs".into()));
        }
        let mut total = 0.0;
        let all: Vec<usize> = (0..n).collect();
        for chunk in all.chunks(self.config.batch_size) {
            let (lq, hq, boxes) = self.val.batch(chunk)?;
            let (out, _) = self.generator.forward(&lq, &boxes, self.dicts.as_ref())?;
            let rec = reconstruction_loss(&out.detach(), &hq, self.generator.encoder(), &self.config.weights)?;
            total += scalar(&rec.total)? * chunk.len() as f64;
        }
        Ok(total / n as f64)
    }

    /// Plateau schedule: after `lr_patience` consecutive validations that
    /// fail to improve on the best so far, both learning rates halve.
    pub fn observe_validation(&mut self, loss: f64) {
        match self.best_val {
            Some(best) if loss >= best => {
                self.stale_evals += 1;
                if self.stale_evals >= self.config.lr_patience {
                    self.opt_g.lr *= 0.5;
                    self.opt_d.lr *= 0.5;
                    self.stale_evals = 0;
                    log::info!("validation plateau, lr -> {:e}", self.opt_g.lr);
                }
            }
            _ => {
                self.best_val = Some(loss);
                self.stale_evals = 0;
            }
        }
    }

    fn state_text(&self) -> String {
        let mut t = self.config.to_text();
        t.push_str(&self.generator.encoder().config().to_text());
        writeln!(t, "encoder_hash={}", self.generator.encoder().hash()).unwrap();
        writeln!(t, "step={}", self.step).unwrap();
        if let Some(b) = self.best_val {
            writeln!(t, "best_val={b:e}").unwrap();
        }
        writeln!(t, "stale_evals={}", self.stale_evals).unwrap();
        t.push_str(&self.opt_g.state_text("opt_g."));
        t.push_str(&self.opt_d.state_text("opt_d."));
        t
    }

    /// Full training state; [`Generator::load`] also accepts this file.
    pub fn save_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut tensors = self.generator.named_tensors()?;
        tensors.extend(self.disc.params().named_tensors("d."));
        tensors.extend(self.disc.state_tensors("sn."));
        tensors.extend(self.opt_g.state_tensors("opt_g."));
        tensors.extend(self.opt_d.state_tensors("opt_d."));
        blob::save(path, &self.state_text(), &tensors)
    }

    fn checkpoint(&mut self) -> Result<()> {
        let Some(dir) = self.out_dir.clone() else {
            return Ok(());
        };
        self.flush_log(&dir.join(LOG_FILE))?;
        self.save_checkpoint(dir.join(CHECKPOINT_FILE))
    }

    fn flush_log(&mut self, path: &Path) -> Result<()> {
        let fresh = !path.exists();
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(f, "{LOG_HEADER}")?;
        }
        for row in &self.log[self.flushed..] {
            writeln!(f, "{}", row.to_csv())?;
        }
        self.flushed = self.log.len();
        Ok(())
    }

    /// Continues a run from [`Trainer::save_checkpoint`] output. The same
    /// pairs (and dictionary) must be supplied for the trajectory to match.
    pub fn resume(
        path: impl AsRef<Path>,
        dicts: Option<DictionarySet>,
        train: &[Pair],
        val: &[Pair],
    ) -> Result<Self> {
        let file = blob::load(path, &Device::Cpu)?;
        let kv = parse_key_values(&file.text)?;
        let config = TrainingConfig::from_map(&kv)?;
        let generator = Generator::from_blob(&file, DTYPE)?;
        let mut disc = DiscriminatorBank::new(
            config.generator.resolution,
            config.disc_channels,
            config.disc_seed,
            DTYPE,
            &Device::Cpu,
        )?;
        disc.params().load(&file.tensors, "d.")?;
        disc.load_state(&file.tensors, "sn.")?;
        let mut t = Self::assemble(config, generator, disc, dicts, train, val)?;
        let get = |k: &str| -> Result<&String> {
            kv.get(k)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks {k}")))
        };
        let num = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Validation(format!("bad {k} in checkpoint")))
        };
        t.step = num("step")? as u64;
        t.best_val = match kv.get("best_val") {
            Some(v) => Some(v.parse().map_err(|_| Error::Validation("bad best_val".into()))?),
            None => None,
        };
        t.stale_evals = num("stale_evals")? as usize;
        t.opt_g.restore(num("opt_g.t")? as u64, num("opt_g.lr")?, &file.tensors, "opt_g.")?;
        t.opt_d.restore(num("opt_d.t")? as u64, num("opt_d.lr")?, &file.tensors, "opt_d.")?;
        Ok(t)
    }
}
