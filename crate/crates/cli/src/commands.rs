//! The pipeline commands. Each one creates a fresh run directory under
//! `paths.output_dir`, echoes the resolved configuration into it, does its
//! work, and finishes by writing a run manifest. Progress goes to stderr so
//! stdout stays machine-friendly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twindiff_core::ckpt;
use twindiff_core::denoiser::{TextEncoder, UNet};
use twindiff_core::dual::DualModel;
use twindiff_core::error::{CoreError, Result};
use twindiff_core::evalkit::{
    self, bright_region, evaluate_detector, ic_diversity, mask_alignment, median_gray,
    train_detector, EvalReport, FeatureDistance,
};
use twindiff_core::maskgen::extract_mask;
use twindiff_core::params::ParamStore;
use twindiff_core::sample::{export_attention_maps, sample_pairs};
use twindiff_core::sched::{linear_schedule, NoiseSchedule};
use twindiff_core::synthdata::{
    generate_dataset, make_normal_sample, read_dataset, read_normal_set, read_rgb, write_dataset,
    write_normal_set, write_rgb, BinaryMask, Image, SamplePair,
};
use twindiff_core::train;

use crate::config::RunConfig;
use crate::manifest::{create_run_dir, echo_config, finalize_run};

// Every stage derives its randomness from the master seed plus a fixed
// offset, so stages are decoupled: rerunning one never shifts another.
const SEED_DATA_PAIRS: u64 = 1;
const SEED_DATA_NORMALS: u64 = 2;
const SEED_MODEL_INIT: u64 = 3;
const SEED_PRETRAIN: u64 = 4;
const SEED_FINETUNE: u64 = 5;
const SEED_DETECTOR: u64 = 6;
const SEED_HOLDOUT_PAIRS: u64 = 7;
const SEED_HOLDOUT_NORMALS: u64 = 8;
const SEED_ATTN: u64 = 9;
/// Generation seeds occupy a block of their own: base + i for pair i.
const SEED_GENERATE_BASE: u64 = 0x10000;

struct Run {
    dir: PathBuf,
    started: Instant,
}

fn begin(cfg: &RunConfig, command: &str) -> Result<Run> {
    let dir = create_run_dir(&cfg.paths.output_dir, command)?;
    echo_config(&dir, cfg)?;
    eprintln!("[{command}] run directory {}", dir.display());
    Ok(Run { dir, started: Instant::now() })
}

fn finish(run: Run, cfg: &RunConfig, command: &str) -> Result<PathBuf> {
    let manifest = finalize_run(&run.dir, command, cfg, run.started)?;
    eprintln!(
        "[{command}] wrote {} file(s) in {} ms",
        manifest.produced.len(),
        manifest.wall_time_ms
    );
    Ok(run.dir)
}

fn progress(tag: &'static str, steps: usize) -> impl FnMut(usize, f64) {
    let every = (steps / 10).max(1);
    move |step, loss| {
        if (step + 1) % every == 0 || step + 1 == steps {
            eprintln!("[{tag}] step {}/{steps} loss {loss:.6}", step + 1);
        }
    }
}

fn schedule_of(cfg: &RunConfig) -> Result<NoiseSchedule> {
    linear_schedule(cfg.schedule.t_count, cfg.schedule.beta_start, cfg.schedule.beta_end)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CoreError::Data(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-data
// ---------------------------------------------------------------------------

/// Synthesize the working dataset: anomalous pairs under `dataset/pairs` and
/// a defect-free set under `dataset/normal`.
pub fn cmd_gen_data(cfg: &RunConfig) -> Result<PathBuf> {
    let run = begin(cfg, "gen-data")?;
    let spec = cfg
        .dataset
        .spec(cfg.dataset.anomaly_count, cfg.seed.wrapping_add(SEED_DATA_PAIRS));
    let pairs = generate_dataset(&spec)?;
    write_dataset(&pairs, &run.dir.join("dataset/pairs"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_DATA_NORMALS));
    let normals: Vec<(Image, BinaryMask)> = (0..cfg.dataset.normal_count)
        .map(|_| make_normal_sample(&spec, &mut rng))
        .collect::<Result<_>>()?;
    write_normal_set(&normals, &run.dir.join("dataset/normal"))?;
    eprintln!(
        "[gen-data] {} anomalous pair(s), {} normal image(s)",
        pairs.len(),
        normals.len()
    );
    finish(run, cfg, "gen-data")
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

/// Stage one: train the base denoiser on the defect-free images and save a
/// base checkpoint under `<run>/base`.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PathBuf> {
    let run = begin(cfg, "pretrain")?;
    let normals = read_normal_set(&cfg.paths.dataset_dir.join("normal"))?;
    let images: Vec<Image> = normals.into_iter().map(|(img, _)| img).collect();
    let sched = schedule_of(cfg)?;

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_MODEL_INIT));
    let unet = UNet::new(&mut store, cfg.model.clone(), &mut rng)?;
    let text = TextEncoder::new(&mut store, &cfg.model, &mut rng);

    let tcfg = cfg
        .pretrain
        .to_train_config(&cfg.prompts, cfg.seed.wrapping_add(SEED_PRETRAIN));
    let losses = train::pretrain(
        &mut store,
        &unet,
        &text,
        &sched,
        &images,
        &tcfg,
        progress("pretrain", tcfg.steps),
    )?;

    ckpt::save_base_checkpoint(&run.dir.join("base"), &store, &cfg.model)?;
    write_json(&run.dir.join("losses.json"), &losses)?;
    finish(run, cfg, "pretrain")
}

// ---------------------------------------------------------------------------
// finetune
// ---------------------------------------------------------------------------

fn few_shot_pairs(cfg: &RunConfig) -> Result<Vec<SamplePair>> {
    let mut pairs = read_dataset(&cfg.paths.dataset_dir.join("pairs"))?;
    let k = cfg.dataset.few_shot_count;
    if pairs.len() < k {
        return Err(CoreError::Data(format!(
            "dataset holds {} pair(s) but few_shot_count is {k}",
            pairs.len()
        )));
    }
    pairs.truncate(k);
    Ok(pairs)
}

/// Stage two: load a base checkpoint, attach the dual branches, adapt them on
/// the few-shot anomaly pairs, and save a dual checkpoint under `<run>/dual`.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<PathBuf> {
    let run = begin(cfg, "finetune")?;
    let pairs = few_shot_pairs(cfg)?;
    let sched = schedule_of(cfg)?;

    let manifest = ckpt::read_manifest(&cfg.paths.checkpoint_dir)?;
    if manifest.kind != ckpt::CheckpointKind::Base {
        return Err(CoreError::Config(format!(
            "finetune expects a base checkpoint in {}, found {:?}",
            cfg.paths.checkpoint_dir.display(),
            manifest.kind
        )));
    }
    if manifest.config != cfg.model {
        return Err(CoreError::Config(
            "checkpoint model configuration differs from the [model] section".into(),
        ));
    }

    let mut store = ParamStore::<f32>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_MODEL_INIT));
    let model = DualModel::new(&mut store, cfg.model.clone(), cfg.dual.background_conditioning, &mut rng)?;
    // Subset apply: the base tensors come from stage one, adapters stay fresh.
    ckpt::apply_checkpoint(&mut store, &cfg.paths.checkpoint_dir, false)?;

    let tcfg = cfg
        .finetune
        .to_train_config(&cfg.prompts, cfg.seed.wrapping_add(SEED_FINETUNE));
    let losses = train::finetune(
        &mut store,
        &model,
        &sched,
        &pairs,
        &tcfg,
        progress("finetune", tcfg.steps),
    )?;

    ckpt::save_dual_checkpoint(&run.dir.join("dual"), &store, &model)?;
    write_json(&run.dir.join("losses.json"), &losses)?;
    finish(run, cfg, "finetune")
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

/// Index of a generated pair set (`gen/` directory).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSetManifest {
    pub image_size: usize,
    pub count: usize,
    pub seeds: Vec<u64>,
}

pub const GENERATED_MANIFEST: &str = "generated.json";

/// Read back a `gen/` directory: whole images, anomaly parts, seeds.
pub fn read_generated_set(dir: &Path) -> Result<(Vec<Image>, Vec<Image>, Vec<u64>)> {
    let text = std::fs::read_to_string(dir.join(GENERATED_MANIFEST)).map_err(|e| {
        CoreError::Data(format!("missing {GENERATED_MANIFEST} in {}: {e}", dir.display()))
    })?;
    let manifest: GeneratedSetManifest = serde_json::from_str(&text)
        .map_err(|e| CoreError::Data(format!("malformed {GENERATED_MANIFEST}: {e}")))?;
    if manifest.seeds.len() != manifest.count {
        return Err(CoreError::Data(format!(
            "{GENERATED_MANIFEST} lists {} seed(s) for count {}",
            manifest.seeds.len(),
            manifest.count
        )));
    }
    let mut images = Vec::with_capacity(manifest.count);
    let mut parts = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        images.push(read_rgb(&dir.join(format!("{i}_image.png")))?);
        parts.push(read_rgb(&dir.join(format!("{i}_part.png")))?);
    }
    Ok((images, parts, manifest.seeds))
}

fn load_dual_model(cfg: &RunConfig) -> Result<(ParamStore<f32>, DualModel)> {
    let manifest = ckpt::read_manifest(&cfg.paths.checkpoint_dir)?;
    if manifest.kind != ckpt::CheckpointKind::Dual {
        return Err(CoreError::Config(format!(
            "expected a dual checkpoint in {}, found {:?}",
            cfg.paths.checkpoint_dir.display(),
            manifest.kind
        )));
    }
    if manifest.config != cfg.model {
        return Err(CoreError::Config(
            "checkpoint model configuration differs from the [model] section".into(),
        ));
    }
    let mut store = ParamStore::<f32>::new();
    // Initializer draws are irrelevant: the checkpoint overwrites everything.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_MODEL_INIT));
    let model = DualModel::new(
        &mut store,
        manifest.config.clone(),
        manifest.background_conditioning,
        &mut rng,
    )?;
    ckpt::apply_checkpoint(&mut store, &cfg.paths.checkpoint_dir, true)?;
    Ok((store, model))
}

/// The background image conditioning the whole-image branch at sampling
/// time: the first training pair's background, a fixed, reproducible choice.
fn sampling_background(cfg: &RunConfig, model: &DualModel) -> Result<Option<Image>> {
    if !model.with_background() {
        return Ok(None);
    }
    let pairs = read_dataset(&cfg.paths.dataset_dir.join("pairs"))?;
    let first = pairs.into_iter().next().ok_or_else(|| {
        CoreError::Data("background conditioning needs at least one dataset pair".into())
    })?;
    Ok(Some(first.background))
}

/// Sample image/part pairs from a dual checkpoint into `<run>/gen`.
pub fn cmd_generate(cfg: &RunConfig, count_override: Option<usize>) -> Result<PathBuf> {
    let count = count_override.unwrap_or(cfg.sample.count);
    if count == 0 {
        return Err(CoreError::Config("generation count must be ≥ 1".into()));
    }
    let run = begin(cfg, "generate")?;
    let (store, model) = load_dual_model(cfg)?;
    let background = sampling_background(cfg, &model)?;
    let sched = schedule_of(cfg)?;
    let scfg = cfg.sample.to_sample_config(&cfg.prompts);

    let base = cfg.seed.wrapping_add(SEED_GENERATE_BASE);
    let seeds: Vec<u64> = (0..count as u64).map(|i| base.wrapping_add(i)).collect();
    let out_dir = run.dir.join("gen");
    std::fs::create_dir_all(&out_dir)?;
    // Sample chunk by chunk so progress is visible and memory stays flat.
    let mut done = 0usize;
    for chunk in seeds.chunks(scfg.batch_size.max(1)) {
        let pairs = sample_pairs(&store, &model, &sched, &scfg, background.as_ref(), chunk)?;
        for pair in &pairs {
            write_rgb(&out_dir.join(format!("{done}_image.png")), &pair.image)?;
            write_rgb(&out_dir.join(format!("{done}_part.png")), &pair.anomaly_part)?;
            done += 1;
        }
        eprintln!("[generate] {done}/{count} pair(s)");
    }
    let manifest = GeneratedSetManifest { image_size: cfg.model.image_size, count, seeds };
    write_json(&out_dir.join(GENERATED_MANIFEST), &manifest)?;
    finish(run, cfg, "generate")
}

// ---------------------------------------------------------------------------
// extract-masks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractionSummary {
    pub count: usize,
    pub nonempty_count: usize,
}

/// Threshold each generated anomaly part into a binary mask under
/// `<run>/masks`. The input directory is never touched.
pub fn cmd_extract_masks(cfg: &RunConfig) -> Result<PathBuf> {
    let run = begin(cfg, "extract-masks")?;
    let (_, parts, _) = read_generated_set(&cfg.paths.pairs_dir)?;
    let out_dir = run.dir.join("masks");
    std::fs::create_dir_all(&out_dir)?;
    let mut nonempty = 0usize;
    for (i, part) in parts.iter().enumerate() {
        let mask = extract_mask(part, &cfg.mask);
        if !mask.is_empty() {
            nonempty += 1;
        }
        twindiff_core::synthdata::write_gray(&out_dir.join(format!("{i}_mask.png")), &mask)?;
    }
    let summary = ExtractionSummary { count: parts.len(), nonempty_count: nonempty };
    write_json(&out_dir.join("extracted.json"), &summary)?;
    eprintln!("[extract-masks] {} mask(s), {} nonempty", summary.count, summary.nonempty_count);
    finish(run, cfg, "extract-masks")
}

// ---------------------------------------------------------------------------
// evaluate
// ---------------------------------------------------------------------------

/// Score a generated pair set end to end and write `report.{json,txt}`.
///
/// Reads the original dataset (few-shot targets and the defect-free
/// reference) plus the generated pairs, extracts masks in memory, then:
/// diversity of the generated images around the few-shot targets, alignment
/// of the extracted masks with visibly deviating pixels, and detection
/// scores of a small detector trained on the generated data and measured on
/// fresh held-out samples. Unit-length image descriptors sit at most 2
/// apart, so the reported diversity is half the raw mean nearest-target
/// distance, which places it in [0,1] like every other report field.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<PathBuf> {
    let run = begin(cfg, "evaluate")?;
    let targets: Vec<Image> = few_shot_pairs(cfg)?.into_iter().map(|p| p.image).collect();
    let normals = read_normal_set(&cfg.paths.dataset_dir.join("normal"))?;
    let (gen_images, gen_parts, _) = read_generated_set(&cfg.paths.pairs_dir)?;
    if gen_images.is_empty() {
        return Err(CoreError::Data("the generated set is empty".into()));
    }

    let masks: Vec<BinaryMask> = gen_parts.iter().map(|p| extract_mask(p, &cfg.mask)).collect();

    let raw_diversity = ic_diversity(&gen_images, &targets, &FeatureDistance::desk_default())?;
    let diversity = raw_diversity / 2.0;

    let normal_images: Vec<Image> = normals.iter().map(|(img, _)| img.clone()).collect();
    let median_normal = median_gray(&normal_images)?;
    let objects: Vec<BinaryMask> = gen_images
        .iter()
        .map(|img| bright_region(img, cfg.eval.bright_threshold))
        .collect();
    let alignment = mask_alignment(&gen_images, &masks, &objects, median_normal, cfg.eval.alignment_tau)?;

    // Detector training set: generated anomalies with their extracted masks,
    // plus an equal share of defect-free images with empty masks.
    let mut train_set: Vec<(Image, BinaryMask)> =
        gen_images.iter().cloned().zip(masks.iter().cloned()).collect();
    let n_normals = normals.len().min(gen_images.len());
    for (img, _) in normals.iter().take(n_normals) {
        let empty = BinaryMask::empty(img.height(), img.width());
        train_set.push((img.clone(), empty));
    }

    // Held-out scoring set: freshly synthesized anomalies and normals that
    // none of the pipeline stages has seen.
    let holdout = holdout_set(cfg)?;

    let det_cfg = cfg.eval.detector_config();
    let det_tcfg = cfg.eval.detector_train_config(cfg.seed.wrapping_add(SEED_DETECTOR));
    eprintln!(
        "[evaluate] training detector on {} image(s), scoring on {} held-out image(s)",
        train_set.len(),
        holdout.len()
    );
    let trained = train_detector(&det_cfg, &det_tcfg, &train_set, &holdout)?;
    for w in &trained.warnings {
        eprintln!("[evaluate] warning: {w}");
    }
    let detection = evaluate_detector(&trained.store, &trained.detector, &holdout)?;

    let report = EvalReport {
        ic_diversity: diversity,
        mask_iou_mean: alignment.alignment_mean,
        pixel_auroc: detection.pixel.auroc,
        pixel_ap: detection.pixel.average_precision,
        pixel_f1max: detection.pixel.f1_max,
        image_auroc: detection.image.auroc,
        image_ap: detection.image.average_precision,
        image_f1max: detection.image.f1_max,
        nonempty_mask_fraction: alignment.nonempty_mask_fraction,
    };
    report.validate()?;

    write_json(&run.dir.join("report.json"), &report)?;
    std::fs::write(run.dir.join("report.txt"), report.to_text())?;
    let details = serde_json::json!({
        "raw_ic_diversity": raw_diversity,
        "median_normal_gray": median_normal,
        "inside_object_fraction_mean": alignment.inside_object_fraction_mean,
        "detector_chosen_repeat": trained.chosen_repeat,
        "detector_val_average_precision": trained.val_average_precision,
        "detector_losses": trained.losses,
        "detector_warnings": trained.warnings,
        "train_images": train_set.len(),
        "holdout_images": holdout.len(),
    });
    write_json(&run.dir.join("details.json"), &details)?;
    eprint!("{}", report.to_text());
    finish(run, cfg, "evaluate")
}

fn holdout_set(cfg: &RunConfig) -> Result<Vec<(Image, BinaryMask)>> {
    let spec = cfg
        .dataset
        .spec(cfg.eval.holdout_count, cfg.seed.wrapping_add(SEED_HOLDOUT_PAIRS));
    let mut holdout: Vec<(Image, BinaryMask)> = generate_dataset(&spec)?
        .into_iter()
        .map(|p| (p.image, p.anomaly_mask))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(SEED_HOLDOUT_NORMALS));
    for _ in 0..cfg.eval.holdout_count {
        let (img, _) = make_normal_sample(&spec, &mut rng)?;
        let empty = BinaryMask::empty(img.height(), img.width());
        holdout.push((img, empty));
    }
    Ok(holdout)
}

// ---------------------------------------------------------------------------
// inspect-attn
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnIndexEntry {
    pub site_id: String,
    pub resolution: usize,
    pub token_index: usize,
    pub token_id: usize,
    pub file: String,
}

fn sanitize_component(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' || c == '_' { c } else { '-' })
        .collect()
}

/// Render a [0,1] map as a grayscale RGB panel, upscaled nearest-neighbor.
fn render_map(map: &twindiff_core::sample::AttentionMap, scale: usize) -> Image {
    let (h, w) = (map.map.nrows(), map.map.ncols());
    let mut img = Image::filled(h * scale, w * scale, [0.0; 3]);
    for y in 0..h * scale {
        for x in 0..w * scale {
            let v = map.map[[y / scale, x / scale]];
            for c in 0..3 {
                img.pixels[[y, x, c]] = v;
            }
        }
    }
    img
}

/// Export per-token cross-attention panels of the whole-image branch at one
/// diffusion step into `<run>/attn`.
pub fn cmd_inspect_attn(cfg: &RunConfig) -> Result<PathBuf> {
    let run = begin(cfg, "inspect-attn")?;
    let (store, model) = load_dual_model(cfg)?;
    let background = sampling_background(cfg, &model)?;
    let sched = schedule_of(cfg)?;
    let scfg = cfg.sample.to_sample_config(&cfg.prompts);
    let seed = cfg.seed.wrapping_add(SEED_ATTN);
    let maps = export_attention_maps(
        &store,
        &model,
        &sched,
        &scfg,
        background.as_ref(),
        seed,
        cfg.attn.timestep,
    )?;

    let out_dir = run.dir.join("attn");
    std::fs::create_dir_all(&out_dir)?;
    let mut index = Vec::with_capacity(maps.len());
    for m in &maps {
        let file = format!(
            "{}_tok{}_id{}.png",
            sanitize_component(&m.site_id),
            m.token_index,
            m.token_id
        );
        let panel = render_map(m, cfg.attn.render_scale);
        write_rgb(&out_dir.join(&file), &panel)?;
        index.push(AttnIndexEntry {
            site_id: m.site_id.clone(),
            resolution: m.resolution,
            token_index: m.token_index,
            token_id: m.token_id,
            file,
        });
    }
    write_json(&out_dir.join("attention.json"), &index)?;
    eprintln!("[inspect-attn] {} panel(s) at timestep {}", index.len(), cfg.attn.timestep);
    finish(run, cfg, "inspect-attn")
}

// Re-exported for tests that score detector output without the CLI.
pub use evalkit::DetectionMetrics;
