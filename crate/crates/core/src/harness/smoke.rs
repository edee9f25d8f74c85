//! Small synthetic end-to-end run: train with and without dictionary
//! transfer on procedural faces and score both on held-out pairs.

use std::time::Instant;

use candle_core::{DType, Device};

use super::eval::{evaluate, EvalReport};
use super::pairs::{make_pairs, Task};
use super::train::{Trainer, TrainingConfig};
use crate::dictionary::build_dictionary;
use crate::error::{Error, Result};
use crate::features::{Encoder, EncoderConfig};
use crate::synth::synth_faces;

#[derive(Debug, Clone)]
pub struct ToySetup {
    pub faces: usize,
    pub held_out: usize,
    /// Training pairs reserved for the learning-rate schedule.
    pub val_count: usize,
    pub resolution: usize,
    pub k: usize,
    pub steps: u64,
    pub task: Task,
    pub batch_size: usize,
    pub seed: u64,
    /// Compared against the dictionary-free model.
    pub dft_blocks: usize,
}

impl Default for ToySetup {
    fn default() -> Self {
        Self {
            faces: 200,
            held_out: 40,
            val_count: 32,
            resolution: 64,
            k: 16,
            steps: 2000,
            task: Task::X4,
            batch_size: 8,
            seed: 0,
            dft_blocks: 4,
        }
    }
}

impl ToySetup {
    pub fn training_config(&self, dft_blocks: usize) -> TrainingConfig {
        let mut c = TrainingConfig {
            batch_size: self.batch_size,
            max_steps: self.steps,
            eval_every: 500,
            checkpoint_every: 0,
            val_count: self.val_count,
            disc_channels: 16,
            data_seed: self.seed,
            ..Default::default()
        };
        c.generator.resolution = self.resolution;
        c.generator.dft_blocks = dft_blocks;
        c.generator.seed = self.seed;
        c
    }
}

#[derive(Debug, Clone)]
pub struct ToyOutcome {
    pub with_dft: EvalReport,
    pub without_dft: EvalReport,
    pub seconds: f64,
}

impl ToyOutcome {
    pub fn summary(&self) -> String {
        format!(
            "bicubic {:.3} dB | dft {:.3} dB (ssim {:.4}) | no dft {:.3} dB (ssim {:.4}) | {:.0} s",
            self.with_dft.mean_psnr_bicubic(),
            self.with_dft.mean_psnr(),
            self.with_dft.mean_ssim(),
            self.without_dft.mean_psnr(),
            self.without_dft.mean_ssim(),
            self.seconds
        )
    }
}

/// Trains both models under the same budget and seeds. `progress` gets
/// one line per 100 steps.
pub fn run_toy(setup: &ToySetup, mut progress: impl FnMut(&str)) -> Result<ToyOutcome> {
    if setup.held_out + setup.val_count >= setup.faces {
        return Err(Error::Config("toy run needs more faces than held-out plus validation".into()));
    }
    let start = Instant::now();
    let encoder = Encoder::random(EncoderConfig::toy(), setup.seed ^ 0x5eed, DType::F32, &Device::Cpu)?;
    let faces = synth_faces(setup.faces, setup.resolution, setup.seed);
    let n_fit = setup.faces - setup.held_out;
    let dicts = build_dictionary(&faces[..n_fit], &encoder, setup.k, setup.seed)?;
    let pairs = make_pairs(&faces, setup.task, setup.seed, setup.resolution)?;
    let (fit, test) = pairs.split_at(n_fit);
    let (train, val) = fit.split_at(n_fit - setup.val_count);

    let mut reports = Vec::new();
    for blocks in [setup.dft_blocks, 0] {
        let config = setup.training_config(blocks);
        let d = (blocks > 0).then(|| dicts.clone());
        let mut trainer = Trainer::new(config, encoder.clone(), d, train, val)?;
        while trainer.steps_done() < setup.steps {
            let row = trainer.step()?;
            if row.step % 100 == 0 {
                progress(&format!(
                    "dft_blocks={blocks} step {} rec {:.5} adv_g {:.4} d {:.4} lr {:e}",
                    row.step, row.loss_rec, row.loss_adv_g, row.loss_d, row.lr
                ));
            }
        }
        let name = format!("toy-dft{blocks}");
        reports.push(evaluate(trainer.generator(), trainer.dictionary(), test, &name, None)?);
        progress(&format!("{name}: {:.3} dB", reports.last().unwrap().mean_psnr()));
    }
    let without_dft = reports.pop().unwrap();
    let with_dft = reports.pop().unwrap();
    Ok(ToyOutcome {
        with_dft,
        without_dft,
        seconds: start.elapsed().as_secs_f64(),
    })
}
