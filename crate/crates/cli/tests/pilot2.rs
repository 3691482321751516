//! Temporary full-fixture dry run used to calibrate the end-to-end
//! acceptance bounds. Deleted before finalizing. Run with:
//!   cargo test -p twindiff-cli --test pilot2 -- --ignored --nocapture

use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use twindiff_core::denoiser::DenoiserConfig;
use twindiff_core::dual::DualModel;
use twindiff_core::evalkit::{
    bright_region, evaluate_detector, inside_object_fraction_mean, nonempty_mask_fraction,
    train_detector, DetectorConfig, DetectorTrainConfig,
};
use twindiff_core::maskgen::{extract_mask, MaskExtractionConfig};
use twindiff_core::params::ParamStore;
use twindiff_core::sample::{sample_pairs, SampleConfig};
use twindiff_core::sched::linear_schedule;
use twindiff_core::synthdata::{generate_dataset, make_normal_sample, DatasetSpec};
use twindiff_core::train::{finetune, pretrain, TrainConfig};
use twindiff_core::types::{AnomalyType, BinaryMask, Image};

fn fixture_model() -> DenoiserConfig {
    let mut cfg = DenoiserConfig::desk_default();
    cfg.image_size = 32;
    cfg.base_channels = 16;
    cfg.attention_resolutions = vec![8, 4];
    cfg
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[test]
#[ignore]
fn pilot_full_fixture() {
    let total = Instant::now();
    let cfg = fixture_model();
    let sched = linear_schedule(1000, 1e-4, 0.02).unwrap();

    let mut spec = DatasetSpec::desk_default(AnomalyType::Spot, 8, 41);
    spec.image_size = 32;
    let seed_pairs = generate_dataset(&spec).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let normals: Vec<(Image, BinaryMask)> =
        (0..32).map(|_| make_normal_sample(&spec, &mut rng).unwrap()).collect();
    let normal_images: Vec<Image> = normals.iter().map(|(i, _)| i.clone()).collect();

    // One store for both stages; only the base denoiser trains in stage one.
    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let model = DualModel::new(&mut store, cfg.clone(), false, &mut rng).unwrap();
    let ptc = TrainConfig {
        steps: 500,
        batch_size: 4,
        lr: 2e-4,
        cfg_dropout: 0.1,
        flip_prob: 0.5,
        prompt: "a vfx with sks".into(),
        part_prompt: "sks".into(),
        seed: 70,
    };
    let t0 = Instant::now();
    let pl = pretrain(&mut store, &model.unet, &model.text, &sched, &normal_images, &ptc, |_, _| {})
        .unwrap();
    println!(
        "pretrain {} steps in {:.0} s; loss {:.4} -> {:.4}",
        ptc.steps,
        t0.elapsed().as_secs_f64(),
        mean(&pl[..10]),
        mean(&pl[pl.len() - 10..])
    );

    // Stage two on top of the same store (base weights stay, adapters join).
    let ftc = TrainConfig { steps: 400, lr: 2e-4, seed: 71, ..ptc.clone() };
    let t0 = Instant::now();
    let fl = finetune(&mut store, &model, &sched, &seed_pairs, &ftc, |_, _| {}).unwrap();
    let start_mean = mean(&fl[..10]);
    let end_mean = mean(&fl[fl.len() - 10..]);
    println!(
        "finetune {} steps in {:.0} s; 10-step mean {:.4} -> {:.4} (ratio {:.3})",
        ftc.steps,
        t0.elapsed().as_secs_f64(),
        start_mean,
        end_mean,
        end_mean / start_mean
    );

    // Sampling 200 pairs, pure conditional.
    let scfg = SampleConfig::desk_default();
    let seeds: Vec<u64> = (0..200u64).map(|i| 5_000 + i).collect();
    let t0 = Instant::now();
    let gen = sample_pairs(&store, &model, &sched, &scfg, None, &seeds).unwrap();
    println!("sampled {} pairs in {:.0} s", gen.len(), t0.elapsed().as_secs_f64());

    let mcfg = MaskExtractionConfig::default();
    let masks: Vec<BinaryMask> = gen.iter().map(|p| extract_mask(&p.anomaly_part, &mcfg)).collect();
    let objects: Vec<BinaryMask> = gen.iter().map(|p| bright_region(&p.image, 0.4)).collect();
    let nonempty = nonempty_mask_fraction(&masks);
    let inside = inside_object_fraction_mean(&masks, &objects).unwrap();
    println!("nonempty_mask_fraction {nonempty:.3}  inside_object_fraction_mean {inside:.3}");

    // Mask sizes, for a feel of what the model draws.
    let sizes: Vec<usize> = masks
        .iter()
        .map(|m| m.pixels.iter().filter(|&&v| v != 0).count())
        .collect();
    let bright_px: Vec<usize> = objects
        .iter()
        .map(|m| m.pixels.iter().filter(|&&v| v != 0).count())
        .collect();
    println!(
        "mask px: min {} mean {:.0} max {}; object px mean {:.0}",
        sizes.iter().min().unwrap(),
        sizes.iter().sum::<usize>() as f64 / sizes.len() as f64,
        sizes.iter().max().unwrap(),
        bright_px.iter().sum::<usize>() as f64 / bright_px.len() as f64,
    );

    // Detector transfer: generated-trained vs seed-only vs oracle.
    let mut hspec = spec.clone();
    hspec.count = 32;
    hspec.rng_seed = 43;
    let holdout_pairs = generate_dataset(&hspec).unwrap();
    let mut hrng = ChaCha8Rng::seed_from_u64(44);
    let mut holdout: Vec<(Image, BinaryMask)> = holdout_pairs
        .into_iter()
        .map(|p| (p.image, p.anomaly_mask))
        .collect();
    for _ in 0..32 {
        let (img, _) = make_normal_sample(&hspec, &mut hrng).unwrap();
        let e = BinaryMask::empty(img.height(), img.width());
        holdout.push((img, e));
    }

    let dcfg = DetectorConfig::desk_default();
    let dtc = DetectorTrainConfig { steps: 240, batch_size: 8, lr: 2e-3, flip_prob: 0.5, repeats: 1, seed: 90 };

    let gen_train: Vec<(Image, BinaryMask)> = gen
        .iter()
        .map(|p| (p.image.clone(), extract_mask(&p.anomaly_part, &mcfg)))
        .chain(normals.iter().cloned().map(|(i, _)| {
            let e = BinaryMask::empty(i.height(), i.width());
            (i, e)
        }))
        .collect();
    let seed_train: Vec<(Image, BinaryMask)> = seed_pairs
        .iter()
        .map(|p| (p.image.clone(), p.anomaly_mask.clone()))
        .chain(normals.iter().take(8).cloned().map(|(i, _)| {
            let e = BinaryMask::empty(i.height(), i.width());
            (i, e)
        }))
        .collect();
    let mut ospec = spec.clone();
    ospec.count = 100;
    ospec.rng_seed = 45;
    let oracle_train: Vec<(Image, BinaryMask)> = generate_dataset(&ospec)
        .unwrap()
        .into_iter()
        .map(|p| (p.image, p.anomaly_mask))
        .chain(normals.iter().cloned().map(|(i, _)| {
            let e = BinaryMask::empty(i.height(), i.width());
            (i, e)
        }))
        .collect();

    for (name, train_set) in
        [("generated", &gen_train), ("seed-only", &seed_train), ("oracle", &oracle_train)]
    {
        let t0 = Instant::now();
        let trained = train_detector(&dcfg, &dtc, train_set, &holdout).unwrap();
        let m = evaluate_detector(&trained.store, &trained.detector, &holdout).unwrap();
        println!(
            "{name:10} ({} imgs): pixel auroc {:.4} ap {:.4}  image auroc {:.4}  [{:.0} s]",
            train_set.len(),
            m.pixel.auroc,
            m.pixel.average_precision,
            m.image.auroc,
            t0.elapsed().as_secs_f64()
        );
    }
    println!("total {:.0} s", total.elapsed().as_secs_f64());
}
