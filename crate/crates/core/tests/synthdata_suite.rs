//! Generator invariants, dataset round-trips, and mask-extraction agreement.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twindiff_core::maskgen::{extract_mask, mask_stats, MaskExtractionConfig};
use twindiff_core::synthdata::{
    generate_dataset, is_single_component, make_anomaly_sample, make_normal_sample, read_dataset,
    write_dataset, AnomalyType, DatasetSpec, ObjectKind,
};

fn spec(ty: AnomalyType, count: usize, seed: u64) -> DatasetSpec {
    DatasetSpec::desk_default(ty, count, seed)
}

#[test]
fn normal_sample_disk_area_within_radius_bounds() {
    let s = spec(AnomalyType::Spot, 1, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let (_img, mask) = make_normal_sample(&s, &mut rng).unwrap();
    let area = mask.area() as f64;
    let size = s.image_size as f64;
    let lo = std::f64::consts::PI * (0.25 * size - 1.5).powi(2);
    let hi = std::f64::consts::PI * (0.40 * size + 1.5).powi(2);
    assert!(area >= lo && area <= hi, "disk area {area} outside [{lo:.0}, {hi:.0}]");
}

#[test]
fn zero_width_color_interval_gives_constant_background() {
    let mut s = spec(AnomalyType::Spot, 1, 3);
    s.background_color.lo = [0.2, 0.2, 0.2];
    s.background_color.hi = [0.2, 0.2, 0.2];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (img, mask) = make_normal_sample(&s, &mut rng).unwrap();
    for y in 0..s.image_size {
        for x in 0..s.image_size {
            if mask.pixels[[y, x]] == 0 {
                for c in 0..3 {
                    assert_eq!(img.pixels[[y, x, c]], 0.2);
                }
            }
        }
    }
}

#[test]
fn same_seed_bitwise_identical_outputs() {
    let s = spec(AnomalyType::Crack, 3, 99);
    let a = generate_dataset(&s).unwrap();
    let b = generate_dataset(&s).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.image.pixels, y.image.pixels);
        assert_eq!(x.anomaly_mask.pixels, y.anomaly_mask.pixels);
        assert_eq!(x.seed, y.seed);
    }
}

#[test]
fn sample_pair_identities_hold_exactly() {
    for ty in [AnomalyType::Scratch, AnomalyType::Spot, AnomalyType::Crack, AnomalyType::Missing] {
        let s = spec(ty, 4, 11);
        for pair in generate_dataset(&s).unwrap() {
            // I_a = I ⊙ M_a, exactly.
            for y in 0..s.image_size {
                for x in 0..s.image_size {
                    let on = pair.anomaly_mask.pixels[[y, x]] != 0;
                    for c in 0..3 {
                        let expect = if on { pair.image.pixels[[y, x, c]] } else { 0.0 };
                        assert_eq!(pair.anomaly_part.pixels[[y, x, c]], expect);
                    }
                }
            }
            // I_b = (1 − M_f) ⊙ I, exactly.
            for y in 0..s.image_size {
                for x in 0..s.image_size {
                    let off = pair.object_mask.pixels[[y, x]] == 0;
                    for c in 0..3 {
                        let expect = if off { pair.image.pixels[[y, x, c]] } else { 0.0 };
                        assert_eq!(pair.background.pixels[[y, x, c]], expect);
                    }
                }
            }
            assert!(!pair.anomaly_mask.is_empty());
            assert!(pair.anomaly_mask.subset_of(&pair.object_mask), "{ty:?}");
        }
    }
}

#[test]
fn spot_mask_is_single_component_inside_object() {
    let s = spec(AnomalyType::Spot, 6, 21);
    for pair in generate_dataset(&s).unwrap() {
        assert!(is_single_component(&pair.anomaly_mask));
        let st = mask_stats(&pair.anomaly_mask, Some(&pair.object_mask)).unwrap();
        assert_eq!(st.inside_object_fraction, 1.0);
    }
}

#[test]
fn rounded_square_objects_also_satisfy_invariants() {
    let mut s = spec(AnomalyType::Scratch, 4, 31);
    s.object_kind = ObjectKind::RoundedSquare;
    for pair in generate_dataset(&s).unwrap() {
        assert!(!pair.anomaly_mask.is_empty());
        assert!(pair.anomaly_mask.subset_of(&pair.object_mask));
    }
}

#[test]
fn extraction_recovers_generated_masks_exactly() {
    let cfg = MaskExtractionConfig::default();
    for ty in [AnomalyType::Scratch, AnomalyType::Spot, AnomalyType::Crack, AnomalyType::Missing] {
        let s = spec(ty, 8, 1234);
        for pair in generate_dataset(&s).unwrap() {
            let got = extract_mask(&pair.anomaly_part, &cfg);
            let iou = got.iou(&pair.anomaly_mask);
            assert!(iou >= 0.99, "{ty:?}: IoU {iou}");
        }
    }
}

#[test]
fn dataset_round_trip_is_lossless_after_one_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(AnomalyType::Spot, 8, 555);
    let samples = generate_dataset(&s).unwrap();
    write_dataset(&samples, dir.path()).unwrap();
    let back = read_dataset(dir.path()).unwrap();
    assert_eq!(back.len(), 8);
    for (orig, rt) in samples.iter().zip(&back) {
        assert_eq!(rt.anomaly_mask.pixels, orig.anomaly_mask.pixels);
        assert_eq!(rt.object_mask.pixels, orig.object_mask.pixels);
        let q = orig.image.quantize();
        assert_eq!(rt.image.pixels, q.pixels);
        // Reading back and re-quantizing changes nothing.
        assert_eq!(rt.image.quantize().pixels, rt.image.pixels);
        assert_eq!(rt.seed, orig.seed);
    }
}

#[test]
fn read_errors_name_the_missing_piece() {
    let dir = tempfile::tempdir().unwrap();
    let s = spec(AnomalyType::Spot, 2, 9);
    let samples = generate_dataset(&s).unwrap();
    write_dataset(&samples, dir.path()).unwrap();

    // Remove one anomaly_part file.
    std::fs::remove_file(dir.path().join("1_anomaly_part.png")).unwrap();
    let err = read_dataset(dir.path()).unwrap_err().to_string();
    assert!(err.contains("1_anomaly_part.png"), "unexpected error: {err}");

    // Manifest count mismatch.
    let dir2 = tempfile::tempdir().unwrap();
    write_dataset(&samples, dir2.path()).unwrap();
    let mpath = dir2.path().join("manifest.json");
    let text = std::fs::read_to_string(&mpath).unwrap();
    let bumped = text.replace("\"count\": 2", "\"count\": 3");
    std::fs::write(&mpath, bumped).unwrap();
    assert!(read_dataset(dir2.path()).is_err());

    // Malformed manifest.
    std::fs::write(&mpath, "{not json").unwrap();
    let err = read_dataset(dir2.path()).unwrap_err().to_string();
    assert!(err.contains("manifest"), "unexpected error: {err}");
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = spec(AnomalyType::Spot, 0, 1);
    assert!(s.validate().is_err());
    s.count = 1;
    s.image_size = 48;
    assert!(s.validate().is_err());
    s.image_size = 64;
    s.object_color.hi = [1.2, 0.5, 0.5];
    assert!(s.validate().is_err());
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    assert!(make_anomaly_sample(&s, &mut rng).is_err());
}

#[test]
fn normal_set_round_trip_is_lossless_after_one_quantization() {
    use twindiff_core::synthdata::{read_normal_set, write_normal_set};
    let dir = tempfile::tempdir().unwrap();
    let s = spec(AnomalyType::Spot, 1, 77);
    let mut rng = ChaCha8Rng::seed_from_u64(s.rng_seed);
    let samples: Vec<_> = (0..5).map(|_| make_normal_sample(&s, &mut rng).unwrap()).collect();
    let manifest = write_normal_set(&samples, dir.path()).unwrap();
    assert_eq!(manifest.count, 5);
    assert_eq!(manifest.image_size, s.image_size);
    let back = read_normal_set(dir.path()).unwrap();
    assert_eq!(back.len(), 5);
    for ((img, obj), (rt_img, rt_obj)) in samples.iter().zip(&back) {
        assert_eq!(rt_img.pixels, img.quantize().pixels);
        assert_eq!(rt_obj.pixels, obj.pixels);
    }

    // A missing manifest is reported as a data problem.
    let empty = tempfile::tempdir().unwrap();
    assert!(read_normal_set(empty.path()).is_err());
}
