//! Briefly trains a small model on synthetic faces, then restores a held-out
//! face and prints the per-component dictionary choices.
use candle_core::{DType, Device};
use dfdnet::dictionary::build_dictionary;
use dfdnet::features::{Encoder, EncoderConfig};
use dfdnet::harness::{make_pairs, psnr, Task, Trainer, TrainingConfig};
use dfdnet::restorer::restore;
use dfdnet::synth::synth_faces;

fn main() -> dfdnet::Result<()> {
    let steps: u64 = std::env::args().nth(1).map_or(60, |s| s.parse().expect("steps"));
    let res = 32;
    let encoder = Encoder::random(EncoderConfig::toy(), 5, DType::F32, &Device::Cpu)?;
    let faces = synth_faces(41, res, 6);
    let dicts = build_dictionary(&faces[..40], &encoder, 8, 0)?;
    let pairs = make_pairs(&faces, Task::X4, 1, res)?;

    let mut config = TrainingConfig {
        batch_size: 4,
        max_steps: steps,
        eval_every: 0,
        checkpoint_every: 0,
        disc_channels: 8,
        ..Default::default()
    };
    config.generator.resolution = res;
    let mut trainer = Trainer::new(config, encoder, Some(dicts.clone()), &pairs[..40], &[])?;
    for _ in 0..steps {
        trainer.step()?;
    }

    let test = &pairs[40];
    let out = restore(&test.lq, &test.landmarks, Some(&dicts), trainer.generator())?;
    out.image.save("restored.png")?;
    test.lq.save("degraded.png")?;
    println!(
        "PSNR degraded {:.2} dB, restored {:.2} dB after {steps} steps",
        psnr(&test.lq, &test.hq)?,
        psnr(&out.image, &test.hq)?
    );
    for d in &out.diagnostics {
        println!("scale {} {:<9} k*={:?} confidence={:?}", d.scale, d.component.name(), d.k_star, d.mean_confidence);
    }
    Ok(())
}
