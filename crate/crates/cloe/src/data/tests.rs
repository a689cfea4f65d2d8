use super::container::*;
use super::*;
use crate::rng::{stream, STREAM_FLIP};

fn bits_of(samples: &[MultimodalSample<f32>]) -> Vec<u32> {
    let mut out = Vec::new();
    for s in samples {
        for v in s.volumes() {
            out.extend(v.data().iter().map(|x| x.to_bits()));
        }
        out.extend(s.labels().data().iter().map(|&l| l as u32));
    }
    out
}

#[test]
fn generation_is_byte_deterministic() {
    let cfg = PhantomConfig { count: 3, ..PhantomConfig::default() };
    let a = gen_phantoms(&cfg).unwrap();
    let b = gen_phantoms(&cfg).unwrap();
    assert_eq!(bits_of(&a), bits_of(&b));
    assert_ne!(
        bits_of(&a),
        bits_of(&gen_phantoms(&PhantomConfig { seed: 8, ..cfg }).unwrap())
    );
}

#[test]
fn noiseless_full_visibility_regions_are_constant() {
    let cfg = PhantomConfig {
        count: 2,
        noise_sd: 0.0,
        visibility: vec![vec![1, 2, 3]; 4],
        ..PhantomConfig::default()
    };
    for s in gen_phantoms(&cfg).unwrap() {
        for m in 0..s.modalities() {
            let vol = s.volume(m).data();
            for label in 0..4u8 {
                let vals: Vec<f32> = s
                    .labels()
                    .data()
                    .iter()
                    .zip(vol)
                    .filter(|(&l, _)| l == label)
                    .map(|(_, &v)| v)
                    .collect();
                if vals.is_empty() {
                    continue;
                }
                assert!(
                    vals.iter().all(|&v| v == vals[0]),
                    "label {label} not constant in modality {m}"
                );
            }
        }
    }
}

#[test]
fn foreground_fraction_within_bounds_over_100_samples() {
    let cfg = PhantomConfig { count: 100, ..PhantomConfig::default() };
    for s in gen_phantoms(&cfg).unwrap() {
        let fg = s.labels().data().iter().filter(|&&l| l > 0).count();
        let frac = fg as f64 / s.labels().numel() as f64;
        assert!((0.02..=0.15).contains(&frac), "{}: fraction {frac}", s.id);
    }
}

#[test]
fn phantom_regions_strictly_nested_with_nonempty_innermost() {
    let cfg = PhantomConfig { count: 8, ..PhantomConfig::default() };
    let hier = RegionHierarchy::nested_shells(cfg.classes);
    for s in gen_phantoms(&cfg).unwrap() {
        let masks = hier.region_masks(s.labels(), cfg.classes).unwrap();
        for k in 1..masks.len() {
            let inner_count = masks[k].iter().filter(|&&b| b).count();
            assert!(inner_count > 0, "{}: region {k} empty", s.id);
            for v in 0..masks[k].len() {
                assert!(!masks[k][v] || masks[k - 1][v], "nesting violated");
            }
            let outer_count = masks[k - 1].iter().filter(|&&b| b).count();
            assert!(outer_count > inner_count, "nesting not strict");
        }
    }
}

// ── availability masks ──────────────────────────────────────────────────

#[test]
fn mask_construction_and_enumeration() {
    assert!(AvailabilityMask::new(vec![false, false]).is_err());
    let m = AvailabilityMask::from_bits(0b1011, 4).unwrap();
    assert_eq!(m.as_string(), "1101"); // bit 0 = modality 0 = leftmost char
    assert_eq!(m.available(), vec![0, 1, 3]);
    let all = AvailabilityMask::enumerate_nonempty(4);
    assert_eq!(all.len(), 15);
    assert_eq!(all[0].count(), 1);
    assert_eq!(all[14].count(), 4);
}

#[test]
fn apply_mask_identity_zeroing_idempotence() {
    let cfg = PhantomConfig { count: 1, ..PhantomConfig::default() };
    let s = &gen_phantoms(&cfg).unwrap()[0];

    let full = s.apply_mask(&AvailabilityMask::full(4)).unwrap();
    assert_eq!(bits_of(std::slice::from_ref(s)), bits_of(&[full]));

    let m = AvailabilityMask::new(vec![true, false, false, false]).unwrap();
    let masked = s.apply_mask(&m).unwrap();
    assert_eq!(masked.volume(0).data(), s.volume(0).data());
    for k in 1..4 {
        assert!(masked.volume(k).data().iter().all(|&v| v == 0.0));
    }

    let twice = masked.apply_mask(&m).unwrap();
    assert_eq!(bits_of(&[masked]), bits_of(&[twice]));
}

// ── region hierarchy ────────────────────────────────────────────────────

#[test]
fn region_masks_match_definition() {
    let hier = RegionHierarchy::new(vec![
        ("whole".into(), vec![1, 2, 3]),
        ("core".into(), vec![2, 3]),
        ("inner".into(), vec![3]),
    ])
    .unwrap();
    let labels = LabelVolume::new([1, 1, 4], vec![0, 1, 2, 3]).unwrap();
    let masks = hier.region_masks(&labels, 4).unwrap();
    assert_eq!(masks[0], vec![false, true, true, true]);
    assert_eq!(masks[1], vec![false, false, true, true]);
    assert_eq!(masks[2], vec![false, false, false, true]);

    let empty = LabelVolume::zeros([2, 2, 2]);
    for m in hier.region_masks(&empty, 4).unwrap() {
        assert!(m.iter().all(|&b| !b));
    }

    let bad = LabelVolume::new([1, 1, 1], vec![7]).unwrap();
    assert!(hier.region_masks(&bad, 4).is_err());
}

#[test]
fn non_nested_hierarchy_rejected() {
    assert!(RegionHierarchy::new(vec![
        ("a".into(), vec![1, 2]),
        ("b".into(), vec![3]),
    ])
    .is_err());
}

// ── flips and split ─────────────────────────────────────────────────────

#[test]
fn flip_is_an_involution_and_consistent() {
    let cfg = PhantomConfig { count: 1, ..PhantomConfig::default() };
    let s = &gen_phantoms(&cfg).unwrap()[0];
    let f = s.flipped([true, false, true]);
    let back = f.flipped([true, false, true]);
    assert_eq!(bits_of(std::slice::from_ref(s)), bits_of(&[back]));
    // label mass unchanged
    assert_eq!(s.labels().class_counts(4), f.labels().class_counts(4));

    let mut rng = stream(7, STREAM_FLIP);
    let _ = random_flip(s, &mut rng);
}

#[test]
fn split_is_deterministic_and_nonempty() {
    let cfg = PhantomConfig { count: 16, ..PhantomConfig::default() };
    let samples = gen_phantoms(&cfg).unwrap();
    let (train, test) = split_train_test(&samples);
    let (train2, test2) = split_train_test(&samples);
    assert_eq!(train, train2);
    assert_eq!(test, test2);
    assert!(!train.is_empty() && !test.is_empty());
    assert_eq!(train.len() + test.len(), 16);
}

// ── container ───────────────────────────────────────────────────────────

#[test]
fn container_roundtrip_is_bit_exact_for_both_widths() {
    let dir = tempfile::tempdir().unwrap();
    let t32 = Tensor::<f32>::new(
        &[2, 3],
        vec![0.1, -0.25, 1.0e-30, 3.5e30, 0.0, -0.0],
    )
    .unwrap();
    let p32 = dir.path().join("a.cloe");
    write_tensor(&p32, &t32).unwrap();
    let r32 = read_tensor::<f32>(&p32).unwrap();
    assert_eq!(r32.shape(), t32.shape());
    for (a, b) in r32.data().iter().zip(t32.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }

    let t64 = Tensor::<f64>::new(&[3], vec![std::f64::consts::PI, -1.0, 1e-300]).unwrap();
    let p64 = dir.path().join("b.cloe");
    write_tensor(&p64, &t64).unwrap();
    let r64 = read_tensor::<f64>(&p64).unwrap();
    for (a, b) in r64.data().iter().zip(t64.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn one_voxel_file_size_is_header_plus_payload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("one.cloe");
    write_tensor(&p, &Tensor::<f32>::scalar(1.5)).unwrap();
    let size = std::fs::metadata(&p).unwrap().len() as usize;
    assert_eq!(size, HEADER_BYTES + 4);
    assert_eq!(HEADER_BYTES, 4 + 2 + 2 + 2 + 2 + 8 * 4);
}

#[test]
fn corrupt_and_truncated_files_are_errors_not_garbage() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.cloe");
    write_tensor(&p, &Tensor::<f32>::filled(&[4], 2.0)).unwrap();

    let mut bytes = std::fs::read(&p).unwrap();
    bytes[0] = b'X';
    let bad_magic = dir.path().join("bad.cloe");
    std::fs::write(&bad_magic, &bytes).unwrap();
    assert!(matches!(read_tensor::<f32>(&bad_magic), Err(crate::CloeError::Format(_))));

    let truncated = dir.path().join("trunc.cloe");
    let orig = std::fs::read(&p).unwrap();
    std::fs::write(&truncated, &orig[..orig.len() - 3]).unwrap();
    assert!(read_tensor::<f32>(&truncated).is_err());

    // dtype mismatch is a format error, not a reinterpretation
    assert!(read_tensor::<f64>(&p).is_err());

    // non-finite write refused
    let nan = Tensor::<f32>::new(&[1], vec![f32::NAN]).unwrap();
    assert!(write_tensor(&dir.path().join("nan.cloe"), &nan).is_err());
}

#[test]
fn dataset_roundtrip_preserves_everything() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PhantomConfig { count: 3, ..PhantomConfig::default() };
    let samples = gen_phantoms(&cfg).unwrap();
    save_dataset(dir.path(), &samples, cfg.classes).unwrap();
    let (loaded, meta) = load_dataset(dir.path()).unwrap();
    assert_eq!(meta.count, 3);
    assert_eq!(meta.modalities, 4);
    assert_eq!(meta.classes, 4);
    assert_eq!(meta.dims, [32, 32, 32]);
    assert_eq!(bits_of(&samples), bits_of(&loaded));
    assert_eq!(samples[1].id, loaded[1].id);
}

#[test]
fn checkpoint_roundtrip_via_manifest() {
    use crate::param::ParamSet;
    let dir = tempfile::tempdir().unwrap();
    let mut rng = stream(3, crate::rng::STREAM_PARAMS);
    let mut params = ParamSet::<f32>::new();
    params.add_uniform("enc.w", &[4, 2, 3, 3, 3], 54, &mut rng).unwrap();
    params.add_zeros("enc.b", &[4]).unwrap();
    save_params(dir.path(), &params).unwrap();

    let mut fresh = ParamSet::<f32>::new();
    fresh.add_zeros("enc.w", &[4, 2, 3, 3, 3]).unwrap();
    fresh.add_zeros("enc.b", &[4]).unwrap();
    load_params_into(dir.path(), &mut fresh).unwrap();
    for (id, e) in params.iter() {
        let f = fresh.get(fresh.lookup(&e.name).unwrap());
        assert_eq!(e.data, f.data);
        let _ = id;
    }

    // shape mismatch caught
    let mut wrong = ParamSet::<f32>::new();
    wrong.add_zeros("enc.w", &[4, 2, 3, 3, 3]).unwrap();
    wrong.add_zeros("enc.b", &[5]).unwrap();
    assert!(load_params_into(dir.path(), &mut wrong).is_err());
}
