use candle_core::{DType, Device};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::metrics::ssim_taps;
use super::*;
use crate::dictionary::build_dictionary;
use crate::error::Error;
use crate::features::{Encoder, EncoderConfig};
use crate::imaging::Image;
use crate::nn::to_f64_vec;
use crate::synth::synth_faces;

fn encoder() -> Encoder {
    Encoder::random(EncoderConfig::toy(), 21, DType::F32, &Device::Cpu).unwrap()
}

fn toy_config(dft_blocks: usize) -> TrainingConfig {
    let mut c = TrainingConfig {
        batch_size: 4,
        eval_every: 0,
        checkpoint_every: 0,
        disc_channels: 4,
        max_steps: 10,
        ..Default::default()
    };
    c.generator.resolution = 32;
    c.generator.dft_blocks = dft_blocks;
    c
}

fn toy_pairs(n: usize, task: Task) -> Vec<Pair> {
    make_pairs(&synth_faces(n, 32, 8), task, 3, 32).unwrap()
}

fn random_image(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Image {
    Image::from_fn(h, w, |_, _, _| rng.gen_range(0.0..1.0))
}

#[test]
fn pairs_follow_the_task() {
    let faces = synth_faces(6, 32, 1);
    let x4 = make_pairs(&faces, Task::X4, 5, 32).unwrap();
    assert_eq!(x4.len(), 6);
    assert!(x4.iter().all(|p| p.params.downsample == 4.0 && p.task == Task::X4));
    assert!(x4.iter().all(|p| p.lq.height() == 32 && p.hq.width() == 32));
    let x8 = make_pairs(&faces, Task::X8, 5, 32).unwrap();
    assert!(x8.iter().all(|p| p.params.downsample == 8.0));
    let blind = make_pairs(&faces, Task::Blind, 5, 32).unwrap();
    assert!(blind.iter().all(|p| (1.0..=8.0).contains(&p.params.downsample)));

    let again = make_pairs(&faces, Task::X4, 5, 32).unwrap();
    for (a, b) in x4.iter().zip(&again) {
        assert_eq!(a.params, b.params);
        assert_eq!(a.lq.data(), b.lq.data());
    }
    let other = make_pairs(&faces, Task::X4, 6, 32).unwrap();
    assert!(x4.iter().zip(&other).any(|(a, b)| a.params != b.params));

    let mut missing = faces.clone();
    missing[2].landmarks = None;
    let p = make_pairs(&missing, Task::X4, 5, 32).unwrap();
    assert_eq!(p.len(), 5);
    assert!(p.iter().all(|q| q.id != faces[2].id));

    let big = synth_faces(2, 64, 1);
    let scaled = make_pairs(&big, Task::X4, 5, 32).unwrap();
    assert_eq!(scaled[0].hq.height(), 32);
    let (x, y) = big[0].landmarks.as_ref().unwrap().points()[30];
    assert_eq!(scaled[0].landmarks.points()[30], (x / 2.0, y / 2.0));
}

#[test]
fn pairs_round_trip_through_disk() {
    let pairs = toy_pairs(3, Task::Blind);
    let dir = tempfile::tempdir().unwrap();
    save_pairs(&pairs, dir.path()).unwrap();
    let back = load_pairs(dir.path()).unwrap();
    assert_eq!(back.len(), 3);
    for (a, b) in pairs.iter().zip(&back) {
        assert_eq!((&a.id, a.task, &a.params), (&b.id, b.task, &b.params));
        assert_eq!(a.landmarks, b.landmarks);
        let err = a.lq.data().iter().zip(b.lq.data()).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(err <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn psnr_closed_forms() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random_image(&mut rng, 16, 16);
    assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP_DB);
    let c0 = Image::filled(8, 8, 0.25);
    let c1 = Image::filled(8, 8, 0.375);
    // 0.125^2 = 1/64 is exact in binary.
    assert!((psnr(&c0, &c1).unwrap() - 10.0 * 64f64.log10()).abs() < 1e-12);
    let d = Image::from_fn(10, 10, |_, y, x| if (x + y) % 2 == 0 { 0.0 } else { 0.2 });
    let z = Image::filled(10, 10, 0.0);
    // Half the pixels off by 0.2 (as f32) gives MSE ~0.02.
    let want = 10.0 * (1.0 / (0.5 * (0.2f32 as f64).powi(2))).log10();
    assert!((psnr(&d, &z).unwrap() - want).abs() < 1e-9);
    let e = Image::filled(10, 10, 0.1);
    assert!((psnr(&e, &z).unwrap() - 20.0).abs() < 1e-5);
    for _ in 0..5 {
        let a = random_image(&mut rng, 9, 7);
        let b = random_image(&mut rng, 9, 7);
        let mut per_channel = 0.0;
        for c in 0..3 {
            let mut s = 0.0;
            for y in 0..9 {
                for x in 0..7 {
                    s += (a.get(c, y, x) as f64 - b.get(c, y, x) as f64).powi(2);
                }
            }
            per_channel += s / 63.0;
        }
        let want = -10.0 * (per_channel / 3.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-9);
    }
    assert!(matches!(psnr(&a, &z), Err(Error::Shape(_))));
}

fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let g = ssim_taps();
    let (h, w) = (a.height(), a.width());
    let l = |img: &Image, y: usize, x: usize| {
        0.299 * img.get(0, y, x) as f64 + 0.587 * img.get(1, y, x) as f64 + 0.114 * img.get(2, y, x) as f64
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for y0 in 0..=h - 11 {
        for x0 in 0..=w - 11 {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    mx += g[i] * g[j] * l(a, y0 + i, x0 + j);
                    my += g[i] * g[j] * l(b, y0 + i, x0 + j);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let dx = l(a, y0 + i, x0 + j) - mx;
                    let dy = l(b, y0 + i, x0 + j) - my;
                    vx += g[i] * g[j] * dx * dx;
                    vy += g[i] * g[j] * dy * dy;
                    cxy += g[i] * g[j] * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_matches_naive_window_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = random_image(&mut rng, 20, 17);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    let inv = Image::from_fn(20, 17, |c, y, x| 1.0 - a.get(c, y, x));
    assert!(ssim(&a, &inv).unwrap() < 1.0);
    for _ in 0..3 {
        let b = Image::from_fn(20, 17, |c, y, x| (a.get(c, y, x) + rng.gen_range(-0.2..0.2)).clamp(0.0, 1.0));
        let got = ssim(&a, &b).unwrap();
        assert!((got - naive_ssim(&a, &b)).abs() < 1e-6);
        assert!((-1.0..=1.0).contains(&got));
    }
    assert!(ssim(&Image::filled(8, 8, 0.1), &Image::filled(8, 8, 0.1)).is_err());
}

#[test]
fn training_config_text() {
    let c = toy_config(2);
    let back = TrainingConfig::from_text(&c.to_text()).unwrap();
    assert_eq!(back, c);
    let d = TrainingConfig::default();
    assert_eq!((d.lr, d.beta1, d.beta2, d.lr_patience), (2e-4, 0.5, 0.999, 2));
    assert!(matches!(TrainingConfig::from_text("lr=0.1\nlearning_rate=3\n"), Err(Error::Config(_))));
    assert!(TrainingConfig::from_text("lr=0\n").is_err());
    assert!(TrainingConfig::from_text("lr_patience=0\n").is_err());
    assert!(TrainingConfig::from_text("resolution=48\n").is_err());
}

#[test]
fn plateau_halves_learning_rate() {
    let pairs = toy_pairs(4, Task::X4);
    let mut t = Trainer::new(toy_config(0), encoder(), None, &pairs, &[]).unwrap();
    t.observe_validation(1.0);
    t.observe_validation(0.9);
    t.observe_validation(0.95);
    assert_eq!(t.lr(), 2e-4);
    t.observe_validation(0.9);
    assert_eq!(t.lr(), 1e-4);
    t.observe_validation(0.8);
    t.observe_validation(0.8);
    assert_eq!(t.lr(), 1e-4);
}

#[test]
fn overfits_one_batch_without_adversary() {
    let pairs = toy_pairs(4, Task::X4);
    let mut c = toy_config(0);
    c.weights.adversarial = [0.0; 4];
    c.lr = 1e-3;
    let enc = encoder();
    let before = enc.named_tensors("").unwrap();
    let mut t = Trainer::new(c, enc, None, &pairs, &[]).unwrap();
    let losses: Vec<f64> = (0..100).map(|_| t.step().unwrap().loss_rec).collect();
    let head: f64 = losses[..10].iter().sum::<f64>() / 10.0;
    let tail: f64 = losses[90..].iter().sum::<f64>() / 10.0;
    assert!(tail < 0.8 * head, "{head} -> {tail}");
    assert!(t.log().iter().all(|r| r.loss_d == 0.0 && r.loss_adv_g == 0.0));
    let after = t.generator().encoder().named_tensors("").unwrap();
    for ((_, a), (_, b)) in before.iter().zip(&after) {
        assert_eq!(to_f64_vec(a).unwrap(), to_f64_vec(b).unwrap());
    }
    assert!(t.generator().params().all_finite().unwrap());
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let enc = encoder();
    let faces = synth_faces(8, 32, 8);
    let dicts = build_dictionary(&faces, &enc, 4, 1).unwrap();
    let pairs = make_pairs(&faces, Task::X4, 3, 32).unwrap();
    let (train, val) = split_validation(pairs, 2);
    let mut c = toy_config(4);
    c.eval_every = 4;
    let fresh = || Trainer::new(c.clone(), enc.clone(), Some(dicts.clone()), &train, &val).unwrap();

    let mut a = fresh();
    let mut b = fresh();
    for _ in 0..3 {
        a.step().unwrap();
        b.step().unwrap();
    }
    assert_eq!(a.log(), b.log());

    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("c.dfdc");
    a.save_checkpoint(&ckpt).unwrap();
    let straight: Vec<LogRow> = (0..10).map(|_| a.step().unwrap()).collect();
    let mut r = Trainer::resume(&ckpt, Some(dicts.clone()), &train, &val).unwrap();
    assert_eq!(r.steps_done(), 3);
    let resumed: Vec<LogRow> = (0..10).map(|_| r.step().unwrap()).collect();
    for (x, y) in straight.iter().zip(&resumed) {
        assert_eq!(x.step, y.step);
        assert!((x.loss_rec - y.loss_rec).abs() <= 1e-5 * x.loss_rec.abs().max(1.0));
        assert!((x.loss_d - y.loss_d).abs() <= 1e-5);
        assert!((x.loss_adv_g - y.loss_adv_g).abs() <= 1e-5);
    }
    assert!(straight.iter().all(|x| x.loss_d > 0.0));
}

#[test]
fn non_finite_loss_aborts_and_keeps_last_checkpoint() {
    let pairs = toy_pairs(4, Task::X4);
    let mut c = toy_config(0);
    c.checkpoint_every = 2;
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(c, encoder(), None, &pairs, &[]).unwrap();
    t.set_output_dir(dir.path()).unwrap();
    t.step().unwrap();
    t.step().unwrap();
    let ckpt = dir.path().join(train::CHECKPOINT_FILE);
    let saved = std::fs::read(&ckpt).unwrap();
    let log = std::fs::read_to_string(dir.path().join(train::LOG_FILE)).unwrap();
    assert!(log.starts_with(LOG_HEADER));
    assert_eq!(log.lines().count(), 3);
    assert!(dir.path().join(train::CONFIG_SNAPSHOT).exists());

    let mut poisoned = pairs.clone();
    for p in &mut poisoned {
        p.hq.set(0, 3, 3, f32::NAN);
    }
    let mut r = Trainer::resume(&ckpt, None, &poisoned, &[]).unwrap();
    r.set_output_dir(dir.path()).unwrap();
    assert!(matches!(r.step(), Err(Error::NonFinite { step: 3 })));
    assert_eq!(std::fs::read(&ckpt).unwrap(), saved);
}

#[test]
fn evaluation_scores_and_is_read_only() {
    let pairs = toy_pairs(3, Task::X4);
    let t = Trainer::new(toy_config(0), encoder(), None, &pairs, &[]).unwrap();
    let g = t.generator();
    let rec = score_pair(&pairs[0].hq, &pairs[0], None).unwrap();
    assert_eq!((rec.psnr_db, rec.ssim), (PSNR_CAP_DB, 1.0));

    let before: Vec<Vec<f64>> = g.params().iter().map(|(_, v)| to_f64_vec(v.as_tensor()).unwrap()).collect();
    let report = evaluate(g, None, &pairs, "toy", None).unwrap();
    let after: Vec<Vec<f64>> = g.params().iter().map(|(_, v)| to_f64_vec(v.as_tensor()).unwrap()).collect();
    assert_eq!(before, after);
    assert_eq!(report.records.len(), 3);
    let csv = report.to_csv();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(EVAL_HEADER));
    assert!(lines.all(|l| l.split(',').count() == 6 && l.contains(",x4,")));
    assert!(report.records.iter().all(|r| r.psnr_bicubic_db.is_finite() && r.psnr_bicubic_db < PSNR_CAP_DB));
    assert!(report.summary().contains("mean_psnr_bicubic_db="));
}

struct Mae;

impl PerceptualMetric for Mae {
    fn name(&self) -> &str {
        "mae"
    }

    fn distance(&self, a: &Image, b: &Image) -> crate::Result<f64> {
        let n = a.data().len() as f64;
        Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n)
    }
}

#[test]
fn perceptual_adapter_adds_a_column() {
    let pairs = toy_pairs(2, Task::X8);
    let t = Trainer::new(toy_config(0), encoder(), None, &pairs, &[]).unwrap();
    let report = evaluate(t.generator(), None, &pairs, "toy", Some(&Mae)).unwrap();
    assert!(report.to_csv().starts_with(&format!("{EVAL_HEADER},mae\n")));
    assert!(report.records.iter().all(|r| r.perceptual.is_some_and(|d| d > 0.0)));
}
