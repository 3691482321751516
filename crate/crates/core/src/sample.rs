//! Coupled reverse-diffusion sampling: both branches denoise in lockstep
//! through the shared exchange, with optional classifier-free guidance and
//! background conditioning, plus cross-attention map export for inspection.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{ContextPlan, PromptPair, SiteKind};
use crate::dual::{dual_forward, DualBatch, DualModel};
use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::params::ParamStore;
use crate::sched::{ddim_step, q_sample, timestep_subsequence, NoiseSchedule};
use crate::tape::Tape;
use crate::train::{image_to_latent, latent_to_image, standard_normal};
use crate::types::{BinaryMask, Image};

// ---------------------------------------------------------------------------
// Configuration and outputs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct SampleConfig {
    pub num_inference_steps: usize,
    /// DDIM stochasticity; 0 keeps the walk fully deterministic.
    pub eta: f64,
    /// Classifier-free guidance scale. Exactly 1.0 skips the unconditional
    /// pass entirely, so the result is bitwise the pure conditional sampler.
    pub guidance_scale: f64,
    pub prompt: String,
    pub part_prompt: String,
    /// Seeds are processed in chunks of this many to bound peak memory.
    pub batch_size: usize,
}

impl SampleConfig {
    pub fn desk_default() -> Self {
        SampleConfig {
            num_inference_steps: 25,
            eta: 0.0,
            guidance_scale: 1.0,
            prompt: "a vfx with sks".into(),
            part_prompt: "sks".into(),
            batch_size: 4,
        }
    }

    pub fn validate(&self, t_count: usize) -> Result<()> {
        if self.num_inference_steps < 2 || self.num_inference_steps > t_count {
            return Err(CoreError::Config(format!(
                "num_inference_steps must lie in [2, {t_count}], got {}",
                self.num_inference_steps
            )));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(CoreError::Config(format!("eta must be ≥ 0, got {}", self.eta)));
        }
        if !self.guidance_scale.is_finite() {
            return Err(CoreError::Config(format!(
                "guidance_scale must be finite, got {}",
                self.guidance_scale
            )));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One generated anomaly sample: the whole image and its isolated anomaly
/// part, both decoded to [0,1] RGB.
#[derive(Debug, Clone)]
pub struct GeneratedPair {
    pub image: Image,
    pub anomaly_part: Image,
    pub seed: u64,
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

fn check_background<'a>(
    model: &DualModel,
    background: Option<&'a Image>,
) -> Result<Option<&'a Image>> {
    match (model.with_background(), background) {
        (true, None) => Err(CoreError::Config(
            "background conditioning is enabled but no background image was provided".into(),
        )),
        (false, Some(_)) => Err(CoreError::Config(
            "a background image was provided but the model has no background conditioning".into(),
        )),
        (true, Some(img)) => {
            let dim = img.pixels.dim();
            let s = model.config().image_size;
            if dim != (s, s, 3) {
                return Err(CoreError::Shape(format!(
                    "background image has shape {dim:?}, model expects ({s},{s},3)"
                )));
            }
            Ok(Some(img))
        }
        (false, None) => Ok(None),
    }
}

/// Per-seed initial draws, in a fixed order: whole-image latent noise, then
/// anomaly-part latent noise, then (only with background conditioning) the
/// noise that perturbs the background latent at every step.
struct SeedDraws<F: Scalar> {
    rng: ChaCha8Rng,
    z_g: ArrayD<F>,
    z_a: ArrayD<F>,
    eps_b: Option<ArrayD<F>>,
}

fn draw_seed<F: Scalar>(seed: u64, shape: &[usize], with_bg: bool) -> SeedDraws<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_g = standard_normal(&mut rng, shape);
    let z_a = standard_normal(&mut rng, shape);
    let eps_b = with_bg.then(|| standard_normal(&mut rng, shape));
    SeedDraws { rng, z_g, z_a, eps_b }
}

fn stack_items<F: Scalar>(items: &[ArrayD<F>]) -> ArrayD<F> {
    let mut shape = vec![items.len()];
    shape.extend_from_slice(items[0].shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (i, it) in items.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(it);
    }
    out
}

/// Combine a conditional and an unconditional prediction:
/// `uncond + s * (cond - uncond)`.
fn guide<F: Scalar>(cond: &ArrayD<F>, uncond: &ArrayD<F>, s: f64) -> ArrayD<F> {
    let sf = F::from_f64(s);
    ndarray::Zip::from(cond).and(uncond).map_collect(|&c, &u| u + sf * (c - u))
}

/// Generate one image/part pair per seed by running both branches through
/// the coupled reverse walk. `background` is required exactly when the model
/// carries background conditioning; its latent is re-noised to the current
/// step with a per-seed noise that stays fixed across the walk.
pub fn sample_pairs<F: Scalar>(
    store: &ParamStore<F>,
    model: &DualModel,
    sched: &NoiseSchedule,
    scfg: &SampleConfig,
    background: Option<&Image>,
    seeds: &[u64],
) -> Result<Vec<GeneratedPair>> {
    scfg.validate(sched.t_count)?;
    let background = check_background(model, background)?;
    let cfg = model.config();
    let prompts = PromptPair::new(cfg, &scfg.prompt, &scfg.part_prompt)?;
    let s = cfg.image_size;
    let item_shape = [3usize, s, s];
    let steps = timestep_subsequence(sched.t_count, scfg.num_inference_steps)?;
    let with_bg = model.with_background();
    let z0_b_item: Option<ArrayD<F>> = background.map(|img| image_to_latent(img, false));

    let mut out = Vec::with_capacity(seeds.len());
    for chunk in seeds.chunks(scfg.batch_size) {
        let b = chunk.len();
        let mut draws: Vec<SeedDraws<F>> =
            chunk.iter().map(|&sd| draw_seed(sd, &item_shape, with_bg)).collect();
        let mut z_g = stack_items(&draws.iter().map(|d| d.z_g.clone()).collect::<Vec<_>>());
        let mut z_a = stack_items(&draws.iter().map(|d| d.z_a.clone()).collect::<Vec<_>>());
        let bg_pair = z0_b_item.as_ref().map(|z0| {
            let eps: Vec<ArrayD<F>> =
                draws.iter().map(|d| d.eps_b.clone().expect("with_bg draws eps_b")).collect();
            (stack_items(&vec![z0.clone(); b]), stack_items(&eps))
        });

        for (i, &t) in steps.iter().enumerate() {
            let t_prev = if i + 1 < steps.len() { steps[i + 1] as i64 } else { -1 };
            let z_b = match &bg_pair {
                Some((z0b, epsb)) => Some(q_sample(z0b, t, epsb, sched)?),
                None => None,
            };
            let ts = vec![t as f64; b];

            let run = |use_null: bool| -> Result<(ArrayD<F>, ArrayD<F>)> {
                let mk = |tokens: &Vec<usize>| ContextPlan {
                    tokens: tokens.clone(),
                    null_tokens: prompts.null_tokens.clone(),
                    use_null: vec![use_null; b],
                };
                let batch = DualBatch {
                    z_g: z_g.clone(),
                    z_a: z_a.clone(),
                    z_b: z_b.clone(),
                    plan_g: mk(&prompts.p_tokens),
                    plan_a: mk(&prompts.p_prime_tokens),
                    ts: ts.clone(),
                };
                let mut tape = Tape::new();
                let (eg, ea) = dual_forward(&mut tape, store, model, &batch, None)?;
                Ok((tape.value(eg).clone(), tape.value(ea).clone()))
            };

            let (cg, ca) = run(false)?;
            let (eps_g, eps_a) = if scfg.guidance_scale == 1.0 {
                (cg, ca)
            } else {
                let (ug, ua) = run(true)?;
                (guide(&cg, &ug, scfg.guidance_scale), guide(&ca, &ua, scfg.guidance_scale))
            };

            let noise = if scfg.eta > 0.0 {
                // One fresh pair of draws per item per step, global then
                // anomaly, so the walk stays a pure function of the seed.
                let ng: Vec<ArrayD<F>> =
                    draws.iter_mut().map(|d| standard_normal(&mut d.rng, &item_shape)).collect();
                let na: Vec<ArrayD<F>> =
                    draws.iter_mut().map(|d| standard_normal(&mut d.rng, &item_shape)).collect();
                Some((stack_items(&ng), stack_items(&na)))
            } else {
                None
            };
            let (ng, na) = match &noise {
                Some((g, a)) => (Some(g), Some(a)),
                None => (None, None),
            };
            z_g = ddim_step(&z_g, &eps_g, t, t_prev, sched, scfg.eta, ng)?;
            z_a = ddim_step(&z_a, &eps_a, t, t_prev, sched, scfg.eta, na)?;
        }

        for (i, &seed) in chunk.iter().enumerate() {
            let gi = z_g.index_axis(Axis(0), i).to_owned().into_dyn();
            let ai = z_a.index_axis(Axis(0), i).to_owned().into_dyn();
            out.push(GeneratedPair {
                image: latent_to_image(&gi)?,
                anomaly_part: latent_to_image(&ai)?,
                seed,
            });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Cross-attention map export
// ---------------------------------------------------------------------------

/// One exported map: how strongly every spatial position of the whole-image
/// branch attends to one prompt token at one cross-attention site.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub site_id: String,
    pub resolution: usize,
    /// Position of the token in the padded prompt.
    pub token_index: usize,
    /// Vocabulary id at that position.
    pub token_id: usize,
    /// (resolution, resolution), min-max normalized to [0,1]. A constant
    /// map (no spread in attention) exports as all zeros.
    pub map: Array2<f64>,
}

/// Run one conditional coupled forward at diffusion step `timestep` from
/// `seed`'s initial noise and export per-token cross-attention maps of the
/// whole-image branch, heads averaged, one map per (cross site, token).
pub fn export_attention_maps<F: Scalar>(
    store: &ParamStore<F>,
    model: &DualModel,
    sched: &NoiseSchedule,
    scfg: &SampleConfig,
    background: Option<&Image>,
    seed: u64,
    timestep: usize,
) -> Result<Vec<AttentionMap>> {
    scfg.validate(sched.t_count)?;
    let background = check_background(model, background)?;
    if timestep >= sched.t_count {
        return Err(CoreError::Argument(format!(
            "timestep {timestep} out of range (T={})",
            sched.t_count
        )));
    }
    let cfg = model.config();
    let prompts = PromptPair::new(cfg, &scfg.prompt, &scfg.part_prompt)?;
    let s = cfg.image_size;
    let item_shape = [3usize, s, s];
    let with_bg = model.with_background();

    let draws = draw_seed::<F>(seed, &item_shape, with_bg);
    let one = |z: &ArrayD<F>| stack_items(std::slice::from_ref(z));
    let z_b = match background {
        Some(img) => {
            let z0b = one(&image_to_latent(img, false));
            let epsb = one(draws.eps_b.as_ref().expect("with_bg draws eps_b"));
            Some(q_sample(&z0b, timestep, &epsb, sched)?)
        }
        None => None,
    };
    let batch = DualBatch {
        z_g: one(&draws.z_g),
        z_a: one(&draws.z_a),
        z_b,
        plan_g: ContextPlan::all_cond(prompts.p_tokens.clone(), prompts.null_tokens.clone(), 1),
        plan_a: ContextPlan::all_cond(
            prompts.p_prime_tokens.clone(),
            prompts.null_tokens.clone(),
            1,
        ),
        ts: vec![timestep as f64],
    };

    let mut taps = crate::denoiser::ForwardTaps::default();
    let mut tape = Tape::new();
    dual_forward(&mut tape, store, model, &batch, Some(&mut taps))?;

    let global_stream = if with_bg { 1 } else { 0 };
    let mut maps = Vec::new();
    for (site_id, stream, probs_id) in &taps.attn_probs {
        if *stream != global_stream {
            continue;
        }
        let site = model
            .unet
            .sites
            .iter()
            .find(|st| &st.site_id == site_id)
            .ok_or_else(|| CoreError::Eval(format!("tap for unknown site {site_id}")))?;
        if site.kind != SiteKind::CrossAttn {
            continue;
        }
        let probs = tape.value(*probs_id); // (heads, res², L) for batch 1
        let (heads, n, l) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
        let res = site.resolution;
        debug_assert_eq!(n, res * res);
        for j in 0..l {
            let mut flat = vec![0.0f64; n];
            for h in 0..heads {
                for p in 0..n {
                    flat[p] += probs[[h, p, j]].to_f64();
                }
            }
            for v in &mut flat {
                *v /= heads as f64;
            }
            let (lo, hi) = flat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
            let span = hi - lo;
            let map = Array2::from_shape_fn((res, res), |(y, x)| {
                if span > 0.0 {
                    (flat[y * res + x] - lo) / span
                } else {
                    0.0
                }
            });
            maps.push(AttentionMap {
                site_id: site_id.clone(),
                resolution: res,
                token_index: j,
                token_id: prompts.p_tokens[j],
                map,
            });
        }
    }
    Ok(maps)
}

/// Ratio of mean attention density inside a mask to mean density outside it.
/// The mask is block-averaged down to the map's resolution first. An empty
/// mask gives 0; a mask covering everything gives +∞.
pub fn attention_mass_ratio(map: &Array2<f64>, mask: &BinaryMask) -> Result<f64> {
    let (res_y, res_x) = map.dim();
    let (mh, mw) = mask.pixels.dim();
    if res_y == 0 || res_x == 0 || mh == 0 || mw == 0 {
        return Err(CoreError::Shape("attention_mass_ratio: empty inputs".into()));
    }
    if mh % res_y != 0 || mw % res_x != 0 {
        return Err(CoreError::Shape(format!(
            "mask ({mh},{mw}) is not an integer multiple of the map ({res_y},{res_x})"
        )));
    }
    let (by, bx) = (mh / res_y, mw / res_x);
    let mut inside_mass = 0.0;
    let mut inside_w = 0.0;
    let mut outside_mass = 0.0;
    let mut outside_w = 0.0;
    for y in 0..res_y {
        for x in 0..res_x {
            let mut acc = 0.0;
            for yy in 0..by {
                for xx in 0..bx {
                    acc += f64::from(mask.pixels[[y * by + yy, x * bx + xx]].min(1));
                }
            }
            let w = acc / (by * bx) as f64;
            inside_mass += map[[y, x]] * w;
            inside_w += w;
            outside_mass += map[[y, x]] * (1.0 - w);
            outside_w += 1.0 - w;
        }
    }
    if inside_w == 0.0 {
        return Ok(0.0);
    }
    if outside_w == 0.0 {
        return Ok(f64::INFINITY);
    }
    let inside = inside_mass / inside_w;
    let outside = outside_mass / outside_w;
    if outside == 0.0 {
        return Ok(if inside > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(inside / outside)
}
