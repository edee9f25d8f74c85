use candle_core::{DType, Device, Tensor};

use super::*;
use crate::dictionary::{DictionaryManifest, DictionarySet, FORMAT_VERSION};
use crate::features::EncoderConfig;
use crate::nn::gradcheck::check_gradients;
use crate::nn::to_f64_vec;

fn randn(init: &mut Init, dims: &[usize]) -> Tensor {
    init.normal(dims, 1.0, DType::F64, &Device::Cpu).unwrap()
}

fn comp(data: Tensor) -> ComponentFeature {
    ComponentFeature {
        component: Component::Nose,
        scale: 2,
        data,
    }
}

fn stats_oracle(v: &[f64], channels: usize) -> Vec<(f64, f64)> {
    let per = v.len() / channels;
    v.chunks(per)
        .map(|ch| {
            let m = ch.iter().sum::<f64>() / per as f64;
            let var = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / per as f64;
            (m, var.sqrt())
        })
        .collect()
}

#[test]
fn cadain_identity_and_degenerate_cluster() {
    let mut init = Init::new(1);
    let f = comp(randn(&mut init, &[1, 4, 5, 6]));
    let out = cadain(&f, &f).unwrap();
    for (a, b) in to_f64_vec(&out.data).unwrap().iter().zip(to_f64_vec(&f.data).unwrap()) {
        assert!((a - b).abs() < 1e-5);
    }
    let flat = comp(Tensor::ones((1, 4, 5, 6), DType::F64, &Device::Cpu).unwrap());
    let out = to_f64_vec(&cadain(&flat, &f).unwrap().data).unwrap();
    let want = stats_oracle(&to_f64_vec(&f.data).unwrap(), 4);
    for (c, ch) in out.chunks(30).enumerate() {
        assert!(ch.iter().all(|v| (v - want[c].0).abs() < 1e-9));
    }
}

#[test]
fn cadain_transfers_statistics() {
    let mut init = Init::new(2);
    for _ in 0..10 {
        let d = (randn(&mut init, &[1, 3, 4, 4]) * 3.0).unwrap() + 1.5;
        let f = (randn(&mut init, &[1, 3, 4, 4]) * 0.7).unwrap() - 0.3;
        let (d, f) = (comp(d.unwrap()), comp(f.unwrap()));
        let out = stats_oracle(&to_f64_vec(&cadain(&d, &f).unwrap().data).unwrap(), 3);
        let want = stats_oracle(&to_f64_vec(&f.data).unwrap(), 3);
        for (o, w) in out.iter().zip(&want) {
            assert!((o.0 - w.0).abs() < 1e-4 && (o.1 - w.1).abs() < 1e-4, "{o:?} vs {w:?}");
        }
    }
    let bad = comp(Tensor::zeros((1, 3, 4, 5), DType::F64, &Device::Cpu).unwrap());
    let f = comp(Tensor::zeros((1, 3, 4, 4), DType::F64, &Device::Cpu).unwrap());
    assert!(matches!(cadain(&bad, &f), Err(Error::Shape(_))));
}

fn dict_from(t: &Tensor, scale: usize, component: Component) -> ComponentDictionary {
    let dims: [usize; 4] = t.dims().try_into().unwrap();
    let data = t.to_dtype(DType::F32).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    ComponentDictionary::new(scale, component, dims, data).unwrap()
}

/// Per-cluster loop: re-normalize then take the full inner product.
fn naive_scores(f: &ComponentFeature, dict: &ComponentDictionary, opts: &DftOptions) -> Vec<f64> {
    let clusters = dict.tensor(f.data.dtype(), &Device::Cpu).unwrap();
    let fv = to_f64_vec(&f.data).unwrap();
    (0..dict.k())
        .map(|k| {
            let ck = comp(clusters.get(k).unwrap().unsqueeze(0).unwrap());
            let rd = if opts.use_cadain { cadain(&ck, f).unwrap() } else { ck };
            let rv = to_f64_vec(&rd.data).unwrap();
            let dot: f64 = fv.iter().zip(&rv).map(|(a, b)| a * b).sum();
            match opts.match_mode {
                MatchMode::Inner => dot,
                MatchMode::Cosine => {
                    let n = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    dot / (n(&fv) * n(&rv))
                }
            }
        })
        .collect()
}

#[test]
fn batched_scores_equal_loop() {
    let mut init = Init::new(3);
    for (i, mode) in [MatchMode::Inner, MatchMode::Cosine].into_iter().enumerate() {
        for use_cadain in [true, false] {
            let opts = DftOptions {
                use_cadain,
                match_mode: mode,
                ..Default::default()
            };
            let t = (randn(&mut init, &[7, 3, 4, 5]) + i as f64).unwrap();
            let dict = dict_from(&t, 2, Component::Nose);
            let f = comp(randn(&mut init, &[1, 3, 4, 5]));
            let m = feature_match_with(&f, &dict, &opts).unwrap();
            let naive = naive_scores(&f, &dict, &opts);
            for (a, b) in m.scores[0].iter().zip(&naive) {
                assert!((a - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn single_cluster_and_ties() {
    let mut init = Init::new(4);
    let t = randn(&mut init, &[1, 2, 3, 3]);
    let f = comp(randn(&mut init, &[1, 2, 3, 3]));
    assert_eq!(feature_match(&f, &dict_from(&t, 2, Component::Nose)).unwrap().selected_index, [0]);
    let twice = Tensor::cat(&[&t, &t, &t], 0).unwrap();
    assert_eq!(feature_match(&f, &dict_from(&twice, 2, Component::Nose)).unwrap().selected_index, [0]);
}

#[test]
fn positive_multiple_of_input_wins() {
    let mut init = Init::new(5);
    let f = randn(&mut init, &[1, 2, 4, 4]);
    let fv = to_f64_vec(&f).unwrap();
    let norm2: f64 = fv.iter().map(|x| x * x).sum();
    let mut rows = Vec::new();
    for k in 0..6 {
        if k == 3 {
            rows.push(fv.iter().map(|x| 5.0 * x).collect::<Vec<_>>());
        } else {
            let r = to_f64_vec(&randn(&mut init, &[32])).unwrap();
            let dot: f64 = r.iter().zip(&fv).map(|(a, b)| a * b).sum();
            rows.push(r.iter().zip(&fv).map(|(a, b)| a - dot / norm2 * b).collect());
        }
    }
    let t = Tensor::from_vec(rows.concat(), (6, 2, 4, 4), &Device::Cpu).unwrap();
    let dict = dict_from(&t, 2, Component::Nose);
    let input = comp(f);
    let m = feature_match(&input, &dict).unwrap();
    let naive = naive_scores(&input, &dict, &DftOptions::default());
    let loop_best = (0..6).fold(0, |b, k| if naive[k] > naive[b] { k } else { b });
    assert_eq!(loop_best, 3);
    assert_eq!(m.selected_index, [3]);
}

#[test]
fn argmax_survives_uniform_positive_scaling() {
    let mut init = Init::new(6);
    for _ in 0..10 {
        let dict = dict_from(&randn(&mut init, &[9, 3, 3, 4]), 2, Component::Nose);
        let f = randn(&mut init, &[1, 3, 3, 4]);
        let a = feature_match(&comp(f.clone()), &dict).unwrap().selected_index;
        let b = feature_match(&comp((f * 3.7).unwrap()), &dict).unwrap().selected_index;
        assert_eq!(a, b);
    }
}

fn conf_params(channels: usize, seed: u64) -> (ParamStore, ConfidenceParams) {
    let mut store = ParamStore::new(DType::F64, Device::Cpu);
    let mut init = Init::new(seed);
    let p = ConfidenceParams::new(&mut store, &mut init, "conf", channels).unwrap();
    (store, p)
}

#[test]
fn forced_confidence_bounds() {
    let mut init = Init::new(7);
    let f = comp(randn(&mut init, &[2, 3, 4, 4]));
    let dict = dict_from(&randn(&mut init, &[5, 3, 4, 4]), 2, Component::Nose);
    let m = feature_match(&f, &dict).unwrap();
    let (_, mut p) = conf_params(3, 1);
    p.force(Some(0.0));
    assert_eq!(to_f64_vec(&confidence_fuse(&f, &m, &p).unwrap().data).unwrap(), to_f64_vec(&f.data).unwrap());
    p.force(Some(1.0));
    let want = to_f64_vec(&(&f.data + &m.selected.data).unwrap()).unwrap();
    assert_eq!(to_f64_vec(&confidence_fuse(&f, &m, &p).unwrap().data).unwrap(), want);
    p.force(None);
    let v = to_f64_vec(&p.score(&f.data).unwrap()).unwrap();
    assert!(v.iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn confidence_gradients_match_finite_differences() {
    for seed in 0..10u64 {
        let mut init = Init::new(100 + seed);
        let f = comp(randn(&mut init, &[1, 2, 4, 4]));
        let selected = if seed == 0 { f.clone() } else { comp(randn(&mut init, &[1, 2, 4, 4])) };
        let weights = randn(&mut init, &[1, 2, 4, 4]);
        let (store, p) = conf_params(2, seed);
        let m = MatchResult {
            scores: vec![vec![0.0]],
            selected_index: vec![0],
            selected,
        };
        let loss = || -> crate::Result<Tensor> {
            let out = confidence_fuse(&f, &m, &p)?;
            Ok((out.data * &weights)?.sum_all()?)
        };
        let l = crate::nn::scalar(&loss().unwrap()).unwrap();
        assert!(l.is_finite());
        for s in check_gradients(&store, |_| true, 8, 1e-5, seed, loss).unwrap() {
            assert!(s.relative_error(1e-6) < 1e-3, "{s:?}");
        }
    }
}

fn set_for(dicts: Vec<ComponentDictionary>, channels: [usize; 4], k: usize) -> DictionarySet {
    let mut cfg = EncoderConfig::toy();
    cfg.channels = channels;
    let manifest = DictionaryManifest {
        format_version: FORMAT_VERSION,
        k,
        encoder_hash: "test".into(),
        encoder_config: cfg,
        seed: 0,
        sample_count: 0,
        resolution: 32,
    };
    DictionarySet::new(manifest, dicts).unwrap()
}

/// Dictionaries of zeros except at `scale`, where they are `fill(c)`.
fn dict_set(scale: usize, channels: usize, size: usize, k: usize, fill: impl Fn(Component) -> Tensor) -> DictionarySet {
    let mut dicts = Vec::new();
    for s in 1..=4 {
        for c in Component::ALL {
            let t = if s == scale {
                fill(c)
            } else {
                Tensor::zeros((k, channels, size, size), DType::F32, &Device::Cpu).unwrap()
            };
            dicts.push(dict_from(&t, s, c));
        }
    }
    set_for(dicts, [channels; 4], k)
}

fn grid_boxes() -> ComponentBoxes {
    // scale 1, 3x3 crops on exact cells
    [
        Some(RoiBox::new(Component::LeftEye, 1.0, 1.0, 4.0, 4.0).unwrap()),
        Some(RoiBox::new(Component::RightEye, 6.0, 1.0, 9.0, 4.0).unwrap()),
        Some(RoiBox::new(Component::Nose, 4.0, 4.0, 7.0, 7.0).unwrap()),
        Some(RoiBox::new(Component::Mouth, 3.0, 7.0, 6.0, 10.0).unwrap()),
    ]
}

#[test]
fn own_components_with_zero_confidence_pass_through() {
    let mut init = Init::new(8);
    let fm = FeatureMap::new(1, randn(&mut init, &[1, 2, 11, 11])).unwrap();
    let boxes = grid_boxes();
    let set = dict_set(1, 2, 3, 2, |c| {
        let own = roi_align(&fm, &[boxes[c.index()].unwrap()], (3, 3)).unwrap().data;
        Tensor::cat(&[&randn(&mut Init::new(c.index() as u64), &[1, 2, 3, 3]), &own], 0).unwrap()
    });
    let (_, mut p) = conf_params(2, 3);
    p.force(Some(0.0));
    let (out, diag) = dft_block(&fm, &[boxes], &set, Some(&p), &DftOptions::default()).unwrap();
    assert_eq!(to_f64_vec(&out.data).unwrap(), to_f64_vec(&fm.data).unwrap());
    for c in 0..4 {
        assert_eq!(diag.k_star[c], [Some(1)]);
        assert_eq!(diag.mean_confidence[c], [Some(0.0)]);
    }
}

#[test]
fn outside_regions_stay_untouched() {
    let mut init = Init::new(9);
    let boxes = grid_boxes();
    let raw = randn(&mut init, &[1, 2, 11, 11]);
    let mut v = to_f64_vec(&raw).unwrap();
    for c in 0..2 {
        for y in 0..11 {
            for x in 0..11 {
                let inside = boxes.iter().flatten().any(|b| b.contains(x as f64 + 0.5, y as f64 + 0.5));
                if !inside {
                    v[(c * 11 + y) * 11 + x] = 0.0;
                }
            }
        }
    }
    let fm = FeatureMap::new(1, Tensor::from_vec(v.clone(), (1, 2, 11, 11), &Device::Cpu).unwrap()).unwrap();
    let set = dict_set(1, 2, 3, 4, |_| randn(&mut Init::new(5), &[4, 2, 3, 3]));
    let (_, mut p) = conf_params(2, 3);
    p.force(Some(1.0));
    let (out, _) = dft_block(&fm, &[boxes], &set, Some(&p), &DftOptions::default()).unwrap();
    let o = to_f64_vec(&out.data).unwrap();
    for (i, (a, b)) in o.iter().zip(&v).enumerate() {
        if *b == 0.0 {
            let (y, x) = ((i / 11) % 11, i % 11);
            let inside = boxes.iter().flatten().any(|bx| bx.contains(x as f64 + 0.5, y as f64 + 0.5));
            if !inside {
                assert_eq!(*a, 0.0);
            }
        }
    }
}

/// Bilinear sample of channel `ch` of `(C, h, w)` data at index coordinates, clamped.
fn bilinear(src: &[f64], (h, w): (usize, usize), ch: usize, y: f64, x: f64) -> f64 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ly, lx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| src[(ch * h + yy) * w + xx];
    at(y0, x0) * (1.0 - ly) * (1.0 - lx) + at(y0, x1) * (1.0 - ly) * lx + at(y1, x0) * ly * (1.0 - lx) + at(y1, x1) * ly * lx
}

#[test]
fn block_equals_composition_oracle() {
    let mut init = Init::new(10);
    let (c, hh, ww) = (3, 16, 16);
    let fm = FeatureMap::new(2, randn(&mut init, &[1, c, hh, ww])).unwrap();
    // image-space boxes; the block works at scale 2 (stride 2)
    let boxes: ComponentBoxes = [
        Some(RoiBox::new(Component::LeftEye, 3.3, 4.1, 12.7, 11.9).unwrap()),
        Some(RoiBox::new(Component::RightEye, 17.2, 3.6, 27.9, 12.2).unwrap()),
        Some(RoiBox::new(Component::Nose, 10.5, 9.0, 21.4, 20.3).unwrap()),
        Some(RoiBox::new(Component::Mouth, 7.9, 19.6, 24.6, 30.1).unwrap()),
    ];
    let sizes = [4usize, 4, 5, 6];
    let mut dicts = Vec::new();
    for s in 1..=4 {
        for comp_ in Component::ALL {
            let n = if s == 2 { sizes[comp_.index()] } else { 2 };
            dicts.push(dict_from(&randn(&mut init, &[5, c, n, n]), s, comp_));
        }
    }
    let set = set_for(dicts, [c; 4], 5);
    let (_, p) = conf_params(c, 11);
    let opts = DftOptions::default();
    let (out, _) = dft_block(&fm, &[boxes], &set, Some(&p), &opts).unwrap();

    let mut want = to_f64_vec(&fm.data).unwrap();
    for comp_ in Component::ALL {
        let bx = boxes[comp_.index()].unwrap();
        let n = sizes[comp_.index()];
        let crop = roi_align(&fm, &[bx], (n, n)).unwrap();
        let m = feature_match(&crop, set.get(2, comp_)).unwrap();
        let fused = to_f64_vec(&confidence_fuse(&crop, &m, &p).unwrap().data).unwrap();
        let (fx0, fy0, fx1, fy1) = bx.feature_box(2);
        let (bw, bh) = ((fx1 - fx0) / n as f64, (fy1 - fy0) / n as f64);
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..ww {
                    let (cy, cx) = (y as f64 + 0.5, x as f64 + 0.5);
                    if cy >= fy0 && cy < fy1 && cx >= fx0 && cx < fx1 {
                        want[(ch * hh + y) * ww + x] =
                            bilinear(&fused, (n, n), ch, (cy - fy0) / bh - 0.5, (cx - fx0) / bw - 0.5);
                    }
                }
            }
        }
    }
    for (a, b) in to_f64_vec(&out.data).unwrap().iter().zip(&want) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn missing_box_skips_component() {
    let mut init = Init::new(12);
    let fm = FeatureMap::new(1, randn(&mut init, &[2, 2, 11, 11])).unwrap();
    let set = dict_set(1, 2, 3, 2, |_| randn(&mut Init::new(1), &[2, 2, 3, 3]));
    let (_, p) = conf_params(2, 3);
    let mut second = grid_boxes();
    second[2] = None;
    let (_, diag) = dft_block(&fm, &[grid_boxes(), second], &set, Some(&p), &DftOptions::default()).unwrap();
    assert!(diag.k_star[2][0].is_some());
    assert_eq!(diag.k_star[2][1], None);
    assert_eq!(diag.mean_confidence[2][1], None);
}

#[test]
fn swap_without_confidence() {
    let mut init = Init::new(13);
    let fm = FeatureMap::new(1, randn(&mut init, &[1, 2, 11, 11])).unwrap();
    let set = dict_set(1, 2, 3, 3, |_| randn(&mut Init::new(2), &[3, 2, 3, 3]));
    let (_, p) = conf_params(2, 3);
    let opts = DftOptions {
        use_confidence: false,
        ..Default::default()
    };
    let boxes = grid_boxes();
    let (out, diag) = dft_block(&fm, &[boxes], &set, Some(&p), &opts).unwrap();
    let crop = roi_align(&out, &[boxes[3].unwrap()], (3, 3)).unwrap();
    let input_crop = roi_align(&fm, &[boxes[3].unwrap()], (3, 3)).unwrap();
    let m = feature_match(&input_crop, set.get(1, Component::Mouth)).unwrap();
    assert_eq!(to_f64_vec(&crop.data).unwrap(), to_f64_vec(&m.selected.data).unwrap());
    assert_eq!(diag.mean_confidence[3], [None]);
}
