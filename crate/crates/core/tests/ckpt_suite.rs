//! Checkpoint round-trips: exact restore, seeding a dual model's base from a
//! stage-one checkpoint, and rejection of malformed or mismatched files.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use twindiff_core::ckpt::{
    apply_checkpoint, read_manifest, save_base_checkpoint, save_dual_checkpoint, CheckpointKind,
};
use twindiff_core::denoiser::{DenoiserConfig, TextEncoder, UNet};
use twindiff_core::dual::DualModel;
use twindiff_core::error::CoreError;
use twindiff_core::params::ParamStore;

fn base_store(seed: u64, cfg: &DenoiserConfig) -> (ParamStore<f32>, UNet, TextEncoder) {
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unet = UNet::new(&mut store, cfg.clone(), &mut rng).unwrap();
    let text = TextEncoder::new(&mut store, cfg, &mut rng);
    (store, unet, text)
}

fn snapshot(store: &ParamStore<f32>) -> Vec<(String, Vec<u32>)> {
    store
        .ids()
        .map(|id| {
            (store.name(id).to_string(), store.value(id).iter().map(|v| v.to_bits()).collect())
        })
        .collect()
}

fn scramble(store: &mut ParamStore<f32>) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for (i, v) in store.value_mut(id).iter_mut().enumerate() {
            *v = (i % 7) as f32 * 0.123 - 0.3;
        }
    }
}

#[test]
fn exact_round_trip_restores_every_bit() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DenoiserConfig::tiny_test();
    let (mut store, _unet, _text) = base_store(41, &cfg);
    let before = snapshot(&store);

    save_base_checkpoint(dir.path(), &store, &cfg).unwrap();
    scramble(&mut store);
    assert_ne!(snapshot(&store), before, "scramble must change something");

    let manifest = apply_checkpoint(&mut store, dir.path(), true).unwrap();
    assert_eq!(snapshot(&store), before);
    assert_eq!(manifest.kind, CheckpointKind::Base);
    assert!(!manifest.background_conditioning);
    assert_eq!(manifest.config, cfg);
    assert_eq!(manifest.tensors.len(), before.len());

    // Offsets are contiguous in registration order.
    let mut expected = 0u64;
    for rec in &manifest.tensors {
        assert_eq!(rec.offset, expected);
        expected += 4 * rec.shape.iter().product::<usize>() as u64;
    }
}

#[test]
fn base_checkpoint_seeds_a_dual_model_without_touching_adapters() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DenoiserConfig::tiny_test();
    let (base, _unet, _text) = base_store(42, &cfg);
    save_base_checkpoint(dir.path(), &base, &cfg).unwrap();
    let base_snap = snapshot(&base);

    let mut dual_store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let _model = DualModel::new(&mut dual_store, cfg.clone(), true, &mut rng).unwrap();
    let dual_before = snapshot(&dual_store);

    // Subset apply succeeds; exact apply must refuse (adapters uncovered).
    let err = apply_checkpoint(&mut dual_store, dir.path(), true).unwrap_err();
    assert!(matches!(err, CoreError::Config(_)), "got {err:?}");
    let manifest = apply_checkpoint(&mut dual_store, dir.path(), false).unwrap();
    assert_eq!(manifest.kind, CheckpointKind::Base);

    let covered: std::collections::HashMap<&str, &Vec<u32>> =
        base_snap.iter().map(|(n, v)| (n.as_str(), v)).collect();
    for ((name, after), (_, before)) in snapshot(&dual_store).iter().zip(&dual_before) {
        match covered.get(name.as_str()) {
            Some(want) => assert_eq!(&after, want, "{name} not restored from checkpoint"),
            None => assert_eq!(after, before, "{name} should be untouched"),
        }
    }
}

#[test]
fn dual_round_trip_preserves_background_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DenoiserConfig::tiny_test();
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let model = DualModel::new(&mut store, cfg.clone(), true, &mut rng).unwrap();
    let before = snapshot(&store);
    save_dual_checkpoint(dir.path(), &store, &model).unwrap();

    let mut other = ParamStore::<f32>::new();
    let mut rng2 = ChaCha8Rng::seed_from_u64(99);
    let _model2 = DualModel::new(&mut other, cfg, true, &mut rng2).unwrap();
    let manifest = apply_checkpoint(&mut other, dir.path(), true).unwrap();
    assert_eq!(snapshot(&other), before);
    assert_eq!(manifest.kind, CheckpointKind::Dual);
    assert!(manifest.background_conditioning);
}

#[test]
fn malformed_checkpoints_are_rejected() {
    let cfg = DenoiserConfig::tiny_test();
    let (mut store, _unet, _text) = base_store(44, &cfg);

    // Missing directory.
    let gone = std::path::Path::new("/nonexistent/checkpoint");
    assert!(matches!(apply_checkpoint(&mut store, gone, true), Err(CoreError::Io(_))));

    // Corrupt manifest JSON.
    let dir = tempfile::tempdir().unwrap();
    save_base_checkpoint(dir.path(), &store, &cfg).unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    assert!(matches!(read_manifest(dir.path()), Err(CoreError::Data(_))));

    // Unsupported format version.
    let dir2 = tempfile::tempdir().unwrap();
    save_base_checkpoint(dir2.path(), &store, &cfg).unwrap();
    let text = std::fs::read_to_string(dir2.path().join("manifest.json")).unwrap();
    std::fs::write(
        dir2.path().join("manifest.json"),
        text.replace("\"format_version\": 1", "\"format_version\": 9"),
    )
    .unwrap();
    assert!(matches!(read_manifest(dir2.path()), Err(CoreError::Config(_))));

    // Truncated weight blob.
    let dir3 = tempfile::tempdir().unwrap();
    save_base_checkpoint(dir3.path(), &store, &cfg).unwrap();
    let blob = std::fs::read(dir3.path().join("weights.bin")).unwrap();
    std::fs::write(dir3.path().join("weights.bin"), &blob[..blob.len() - 8]).unwrap();
    assert!(matches!(apply_checkpoint(&mut store, dir3.path(), true), Err(CoreError::Data(_))));
}

#[test]
fn mismatched_models_are_rejected() {
    let cfg = DenoiserConfig::tiny_test();
    let (store, _unet, _text) = base_store(45, &cfg);
    let dir = tempfile::tempdir().unwrap();
    save_base_checkpoint(dir.path(), &store, &cfg).unwrap();

    // Same site layout but a different context width: tensor names match,
    // shapes don't.
    let mut cfg_wide = cfg.clone();
    cfg_wide.context_dim = 8;
    let (mut wide, _u, _t) = base_store(46, &cfg_wide);
    let err = apply_checkpoint(&mut wide, dir.path(), true).unwrap_err();
    assert!(matches!(err, CoreError::Shape(_)), "got {err:?}");

    // A dual checkpoint cannot load into a base-only store: adapter tensors
    // have no destination.
    let mut dual_store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let model = DualModel::new(&mut dual_store, cfg.clone(), false, &mut rng).unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    save_dual_checkpoint(dir2.path(), &dual_store, &model).unwrap();
    let (mut base_only, _u2, _t2) = base_store(48, &cfg);
    let err2 = apply_checkpoint(&mut base_only, dir2.path(), true).unwrap_err();
    assert!(matches!(err2, CoreError::Config(_)), "got {err2:?}");
}
