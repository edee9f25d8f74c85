use super::*;
use crate::synth::synth_faces;

fn toy_encoder() -> Encoder {
    Encoder::random(EncoderConfig::toy(), 11, DType::F32, &Device::Cpu).unwrap()
}

#[test]
fn pools_have_one_sample_per_image() {
    let faces = synth_faces(5, 64, 1);
    let enc = toy_encoder();
    let pools = collect_samples(&faces, &enc, 64).unwrap();
    for p in &pools.pools {
        assert_eq!(p.count(), 5);
    }
    let le = pools.get(1, Component::LeftEye);
    assert_eq!(le.dim(), enc.channels(1) * 10 * 10);
}

#[test]
fn face_256_left_eye_sample_length() {
    let faces = synth_faces(1, 256, 4);
    let enc = toy_encoder();
    let pools = collect_samples(&faces, &enc, 256).unwrap();
    assert_eq!(pools.get(1, Component::LeftEye).dim(), enc.channels(1) * 40 * 40);
}

#[test]
fn duplicated_image_gives_identical_samples() {
    let one = synth_faces(1, 64, 2).remove(0);
    let faces: Vec<FaceRecord> = (0..4).map(|_| one.clone()).collect();
    let pools = collect_samples(&faces, &toy_encoder(), 64).unwrap();
    for p in &pools.pools {
        for i in 1..p.count() {
            assert_eq!(p.sample(i), p.sample(0));
        }
    }
}

#[test]
fn missing_landmarks_are_skipped_and_none_usable_is_fatal() {
    let mut faces = synth_faces(3, 64, 5);
    faces[1].landmarks = None;
    let pools = collect_samples(&faces, &toy_encoder(), 64).unwrap();
    assert_eq!(pools.image_count, 2);
    assert_eq!(pools.get(4, Component::Mouth).count(), 2);
    for f in &mut faces {
        f.landmarks = None;
    }
    assert!(matches!(collect_samples(&faces, &toy_encoder(), 64), Err(Error::Data(_))));
}

#[test]
fn build_is_deterministic_and_round_trips() {
    let faces = synth_faces(20, 64, 6);
    let enc = toy_encoder();
    let a = build_dictionary(&faces, &enc, 4, 99).unwrap();
    let b = build_dictionary(&faces, &enc, 4, 99).unwrap();
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    save_dictionary(&a, da.path()).unwrap();
    save_dictionary(&b, db.path()).unwrap();
    for s in 1..=4 {
        for c in Component::ALL {
            let name = format!("dic_s{s}_{c}.bin");
            assert_eq!(
                std::fs::read(da.path().join(&name)).unwrap(),
                std::fs::read(db.path().join(&name)).unwrap()
            );
        }
    }
    let back = load_dictionary(da.path()).unwrap();
    assert_eq!(back, a);
    assert_eq!(back.iter().count(), 16);
    for d in back.iter() {
        assert_eq!(d.k(), back.manifest().k);
        let n = back.sizes().size(d.component(), d.scale());
        assert_eq!(d.dims(), [4, enc.channels(d.scale()), n, n]);
    }
    assert_eq!(back.encoder_hash(), enc.hash());
}

#[test]
fn fault_injection() {
    let faces = synth_faces(6, 64, 7);
    let set = build_dictionary(&faces, &toy_encoder(), 2, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_dictionary(&set, dir.path()).unwrap();

    let manifest = dir.path().join(MANIFEST_FILE);
    let original = std::fs::read_to_string(&manifest).unwrap();
    std::fs::write(&manifest, original.replace("K=2\n", "K=3\n")).unwrap();
    match load_dictionary(dir.path()) {
        Err(Error::Validation(m)) => assert!(m.contains("s=1") && m.contains("left_eye"), "{m}"),
        other => panic!("expected validation error, got {other:?}"),
    }
    std::fs::write(&manifest, &original).unwrap();

    let victim = dir.path().join("dic_s3_nose.bin");
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 5]).unwrap();
    assert!(matches!(load_dictionary(dir.path()), Err(Error::Corruption { .. })));

    let stripped: String = original.lines().filter(|l| !l.starts_with("sha256_")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&manifest, stripped).unwrap();
    assert!(matches!(load_dictionary(dir.path()), Err(Error::Corruption { .. })));

    let mut flipped = bytes.clone();
    let last = flipped.len() - 1;
    flipped[last] ^= 0x40;
    std::fs::write(&victim, &flipped).unwrap();
    std::fs::write(&manifest, &original).unwrap();
    assert!(matches!(load_dictionary(dir.path()), Err(Error::Corruption { .. })));
}

/// Lowest-inertia partition of `pts` into exactly `k` non-empty groups.
fn exhaustive_partition(pts: &[[f64; 2]], k: usize) -> (f64, Vec<usize>) {
    fn sse(pts: &[[f64; 2]], labels: &[usize], k: usize) -> Option<f64> {
        let mut sum = vec![[0.0; 2]; k];
        let mut cnt = vec![0usize; k];
        for (p, &l) in pts.iter().zip(labels) {
            sum[l][0] += p[0];
            sum[l][1] += p[1];
            cnt[l] += 1;
        }
        if cnt.contains(&0) {
            return None;
        }
        Some(
            pts.iter()
                .zip(labels)
                .map(|(p, &l)| {
                    let (mx, my) = (sum[l][0] / cnt[l] as f64, sum[l][1] / cnt[l] as f64);
                    (p[0] - mx).powi(2) + (p[1] - my).powi(2)
                })
                .sum(),
        )
    }
    let n = pts.len();
    let mut labels = vec![0usize; n];
    let mut best = (f64::INFINITY, labels.clone());
    loop {
        if let Some(v) = sse(pts, &labels, k) {
            if v < best.0 {
                best = (v, labels.clone());
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
    }
}

/// Partition equality up to label permutation.
fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let n = a.len();
    (0..n).all(|i| (0..n).all(|j| (a[i] == a[j]) == (b[i] == b[j])))
}

#[test]
fn three_blobs_match_exhaustive_optimum() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let centers = [[0.0, 0.0], [10.0, 0.0], [5.0, 9.0]];
    let mut pts = Vec::new();
    for c in centers {
        for _ in 0..3 {
            pts.push([c[0] + rng.gen_range(-1.0..1.0), c[1] + rng.gen_range(-1.0..1.0)]);
        }
    }
    let flat: Vec<f32> = pts.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect();
    let pts64: Vec<[f64; 2]> = flat.chunks(2).map(|c| [c[0] as f64, c[1] as f64]).collect();
    let (opt, labels) = exhaustive_partition(&pts64, 3);
    let r = kmeans(&flat, 2, &KMeansConfig::new(3, 0)).unwrap();
    assert!(same_partition(&r.assignments, &labels));
    assert!((r.inertia - opt).abs() < 1e-9);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn lloyd_invariants(
            raw in prop::collection::vec(-5.0f32..5.0, 6..60),
            dim in 1usize..4,
            k in 1usize..5,
            seed in any::<u64>(),
        ) {
            let m = raw.len() / dim;
            prop_assume!(m >= k);
            let s = &raw[..m * dim];
            let r = kmeans(s, dim, &KMeansConfig::new(k, seed)).unwrap();
            for h in &r.inertia_history {
                for w in h.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0), "inertia rose {} -> {}", w[0], w[1]);
                }
            }
            for i in 0..m {
                let x = &s[i * dim..(i + 1) * dim];
                let d = |j: usize| -> f64 { x.iter().zip(r.centroid(j)).map(|(&a, &b)| (a as f64 - b).powi(2)).sum() };
                let own = d(r.assignments[i]);
                for j in 0..k {
                    prop_assert!(own <= d(j) + 1e-9);
                }
            }
            if r.converged {
                for j in 0..k {
                    let members: Vec<usize> = (0..m).filter(|&i| r.assignments[i] == j).collect();
                    if members.is_empty() { continue; }
                    for dd in 0..dim {
                        let mean = members.iter().map(|&i| s[i * dim + dd] as f64).sum::<f64>() / members.len() as f64;
                        prop_assert!((mean - r.centroid(j)[dd]).abs() < 1e-5);
                    }
                }
            }
        }
    }
}
