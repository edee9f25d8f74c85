use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dfdnet::dataset::{image_id, list_images, load_faces};
use dfdnet::degradation::{apply_degradation, sample_degradation, KernelSpec};
use dfdnet::dft::MatchMode;
use dfdnet::dictionary::{build_dictionary, load_dictionary, save_dictionary};
use dfdnet::features::{Encoder, EncoderConfig};
use dfdnet::harness::{evaluate, load_pairs, make_pairs, save_pairs, split_validation, Task, Trainer, TrainingConfig};
use dfdnet::imaging::Image;
use dfdnet::landmarks::LandmarkSet;
use dfdnet::restorer::{restore, Generator};
use dfdnet::{Error, Result};

#[derive(Parser)]
#[command(name = "dfd", version, about = "Face restoration with deep component dictionaries")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster encoder features of high-quality faces into component dictionaries.
    BuildDict(BuildDict),
    /// Degrade a directory of images, writing a parameter manifest per image.
    Degrade(Degrade),
    /// Train a restoration model.
    Train(Train),
    /// Restore one image.
    Restore(Restore),
    /// Score a checkpoint on degraded/ground-truth pairs.
    Eval(Eval),
}

#[derive(Args)]
struct BuildDict {
    #[arg(long)]
    images: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    clusters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Frozen encoder weights, or toy:SEED.
    #[arg(long)]
    encoder: PathBuf,
}

#[derive(Args)]
struct Degrade {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Downsampling factor.
    #[arg(long)]
    r: Option<f64>,
    /// Noise level on the 0-255 scale.
    #[arg(long)]
    sigma: Option<f64>,
    /// JPEG quality; 0 skips compression.
    #[arg(long)]
    q: Option<u8>,
    /// gaussian:SIGMA or motion:IDX
    #[arg(long)]
    kernel: Option<KernelSpec>,
    /// With a landmark directory, write a training/evaluation pair set
    /// (hq/, lq/, landmarks/, manifests/) instead of plain degraded images.
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long, default_value = "blind")]
    task: Task,
    #[arg(long, default_value_t = 256)]
    resolution: usize,
}

#[derive(Args)]
struct Train {
    /// key=value training configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Pair directory written by `dfd degrade --landmarks`.
    #[arg(long)]
    pairs: PathBuf,
    /// Frozen encoder weights, or toy:SEED.
    #[arg(long)]
    encoder: PathBuf,
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the checkpoint in `--out`.
    #[arg(long)]
    resume: bool,
    #[arg(long = "match")]
    match_mode: Option<MatchMode>,
    #[arg(long)]
    steps: Option<u64>,
}

#[derive(Args)]
struct Restore {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    landmarks: PathBuf,
    #[arg(long)]
    dict: Option<PathBuf>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON lines: scale, component, k_star, mean_confidence.
    #[arg(long)]
    diag: Option<PathBuf>,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pairs: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    dict: Option<PathBuf>,
    /// Per-image CSV; a summary is printed to stdout.
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("dfd: {e}");
        std::process::exit(1);
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::BuildDict(a) => build_dict(a),
        Command::Degrade(a) => degrade(a),
        Command::Train(a) => train(a),
        Command::Restore(a) => restore_one(a),
        Command::Eval(a) => eval(a),
    }
}

/// A weights file, or `toy:SEED` for the seeded random toy encoder.
fn load_encoder(path: &Path) -> Result<Encoder> {
    if let Some(seed) = path.to_str().and_then(|s| s.strip_prefix("toy:")) {
        let seed = seed.parse().map_err(|_| Error::Config(format!("bad toy encoder seed {seed:?}")))?;
        return Encoder::random(EncoderConfig::toy(), seed, DType::F32, &Device::Cpu);
    }
    Encoder::load(path, DType::F32, &Device::Cpu)
}

fn build_dict(a: BuildDict) -> Result<()> {
    let encoder = load_encoder(&a.encoder)?;
    let faces = load_faces(&a.images, &a.landmarks)?;
    let set = build_dictionary(&faces, &encoder, a.clusters, a.seed)?;
    save_dictionary(&set, &a.out)?;
    log::info!("wrote {} dictionaries (K={}) to {}", set.iter().count(), set.k(), a.out.display());
    Ok(())
}

fn degrade(a: Degrade) -> Result<()> {
    if let Some(lm) = &a.landmarks {
        let faces = load_faces(&a.input, lm)?;
        let pairs = make_pairs(&faces, a.task, a.seed, a.resolution)?;
        save_pairs(&pairs, &a.out)?;
        log::info!("wrote {} {} pairs to {}", pairs.len(), a.task, a.out.display());
        return Ok(());
    }
    fs::create_dir_all(&a.out)?;
    for (i, path) in list_images(&a.input)?.iter().enumerate() {
        let id = image_id(path);
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let mut params = sample_degradation(&mut rng);
        if let Some(r) = a.r {
            params.downsample = r;
        }
        if let Some(s) = a.sigma {
            params.noise_sigma = s;
        }
        if let Some(q) = a.q {
            params.jpeg_quality = (q > 0).then_some(q);
        }
        if let Some(k) = a.kernel {
            params.kernel = k.kernel()?;
        }
        params.validate()?;
        let out = apply_degradation(&Image::load(path)?, &params)?;
        out.save(a.out.join(format!("{id}.png")))?;
        fs::write(a.out.join(format!("{id}.txt")), params.to_manifest())?;
    }
    Ok(())
}

fn train(a: Train) -> Result<()> {
    let mut config = match &a.config {
        Some(p) => TrainingConfig::from_text(&fs::read_to_string(p)?)?,
        None => TrainingConfig::default(),
    };
    if let Some(m) = a.match_mode {
        config.generator.dft.match_mode = m;
    }
    if let Some(s) = a.steps {
        config.max_steps = s;
    }
    let dicts = a.dict.as_deref().map(load_dictionary).transpose()?;
    let (train, val) = split_validation(load_pairs(&a.pairs)?, config.val_count);
    let ckpt = a.out.join("checkpoint.dfdc");
    let mut trainer = if a.resume {
        let mut t = Trainer::resume(&ckpt, dicts, &train, &val)?;
        if let Some(s) = a.steps {
            t.set_max_steps(s);
        }
        t
    } else {
        Trainer::new(config, load_encoder(&a.encoder)?, dicts, &train, &val)?
    };
    trainer.set_output_dir(&a.out)?;
    trainer.run()?;
    log::info!("finished at step {}; checkpoint {}", trainer.steps_done(), ckpt.display());
    Ok(())
}

fn restore_one(a: Restore) -> Result<()> {
    let generator = Generator::load(&a.ckpt, DType::F32)?;
    let dicts = a.dict.as_deref().map(load_dictionary).transpose()?;
    let out = restore(&Image::load(&a.input)?, &LandmarkSet::load(&a.landmarks)?, dicts.as_ref(), &generator)?;
    out.image.save(&a.out)?;
    if let Some(p) = &a.diag {
        let mut f = fs::File::create(p)?;
        for d in &out.diagnostics {
            let line = serde_json::json!({
                "scale": d.scale,
                "component": d.component.name(),
                "k_star": d.k_star,
                "mean_confidence": d.mean_confidence,
            });
            writeln!(f, "{line}")?;
        }
    }
    Ok(())
}

fn eval(a: Eval) -> Result<()> {
    let generator = Generator::load(&a.ckpt, DType::F32)?;
    let dicts = a.dict.as_deref().map(load_dictionary).transpose()?;
    let pairs = load_pairs(&a.pairs)?;
    if pairs.is_empty() {
        return Err(Error::Data(format!("no pairs in {}", a.pairs.display())));
    }
    let model = a.ckpt.display().to_string();
    let report = evaluate(&generator, dicts.as_ref(), &pairs, &model, None)?;
    fs::write(&a.out, report.to_csv())?;
    print!("{}", report.summary());
    Ok(())
}
