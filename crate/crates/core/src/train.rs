//! Two training stages: base denoiser pretraining on whole images, then the
//! dual-branch finetune that fits the adapters, the cross-branch exchange,
//! and (optionally) background injection — with the base U-Net frozen.

use std::collections::HashSet;

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::denoiser::{
    forward_single, tokenize, ContextPlan, PromptPair, TextEncoder, UNet,
};
use crate::dual::{dual_forward, dual_loss, DualBatch, DualModel};
use crate::error::{CoreError, Result};
use crate::num::Scalar;
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::sched::{q_sample_batch, NoiseSchedule};
use crate::tape::Tape;
use crate::types::{Image, SamplePair};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

/// Knobs shared by both training stages. Pretraining ignores `part_prompt`.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability that a sample's prompt is replaced by the null prompt for
    /// this step (guidance dropout). One coin per sample; in the dual stage
    /// the same coin applies to every stream of that sample.
    pub cfg_dropout: f64,
    /// Probability of a horizontal flip. One coin per sample, applied
    /// consistently to every image belonging to it.
    pub flip_prob: f64,
    pub prompt: String,
    pub part_prompt: String,
    pub seed: u64,
}

impl TrainConfig {
    /// Stage-one defaults for the desk-scale model.
    pub fn desk_pretrain() -> Self {
        TrainConfig {
            steps: 1200,
            batch_size: 4,
            lr: 2e-4,
            cfg_dropout: 0.1,
            flip_prob: 0.5,
            prompt: "a vfx".into(),
            part_prompt: String::new(),
            seed: 17,
        }
    }

    /// Stage-two defaults for the desk-scale model.
    pub fn desk_finetune() -> Self {
        TrainConfig {
            steps: 400,
            batch_size: 4,
            lr: 1e-4,
            cfg_dropout: 0.1,
            flip_prob: 0.5,
            prompt: "a vfx with sks".into(),
            part_prompt: "sks".into(),
            seed: 18,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(CoreError::Config("training needs at least one step".into()));
        }
        if self.batch_size == 0 {
            return Err(CoreError::Config("batch size must be positive".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        for (name, p) in [("cfg_dropout", self.cfg_dropout), ("flip_prob", self.flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} must lie in [0,1], got {p}")));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Image <-> latent
// ---------------------------------------------------------------------------

/// RGB image in [0,1], shape (H,W,3), to a channels-first latent in [-1,1].
/// `flip` mirrors the horizontal axis.
pub fn image_to_latent<F: Scalar>(img: &Image, flip: bool) -> ArrayD<F> {
    let (h, w, _) = img.pixels.dim();
    let mut out = ArrayD::zeros(IxDyn(&[3, h, w]));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sx = if flip { w - 1 - x } else { x };
                out[[c, y, x]] = F::from_f64(2.0 * img.pixels[[y, sx, c]] - 1.0);
            }
        }
    }
    out
}

/// Channels-first latent, shape (3,H,W), back to an RGB image; values are
/// mapped through (z+1)/2 and clamped to [0,1].
pub fn latent_to_image<F: Scalar>(z: &ArrayD<F>) -> Result<Image> {
    let shape = z.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CoreError::Shape(format!(
            "latent_to_image expects (3,H,W), got {shape:?}"
        )));
    }
    let (h, w) = (shape[1], shape[2]);
    let mut pixels = ndarray::Array3::zeros((h, w, 3));
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let v = (z[[c, y, x]].to_f64() + 1.0) / 2.0;
                pixels[[y, x, c]] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(Image::new(pixels))
}

/// Standard-normal array with elements drawn in row-major order.
pub fn standard_normal<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<F> {
    let n: usize = shape.iter().product();
    let data: Vec<F> = (0..n).map(|_| F::from_f64(rng.sample(StandardNormal))).collect();
    ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape/product mismatch")
}

// ---------------------------------------------------------------------------
// Shared per-step sampling
// ---------------------------------------------------------------------------

/// Per-sample draws for one training step, taken in a fixed order so runs
/// are reproducible from the stage seed alone.
struct ItemDraw {
    idx: usize,
    flip: bool,
    t: usize,
    drop_prompt: bool,
}

/// Coin with a draw count independent of the probability, so changing `p`
/// (even to 0 or 1) never shifts later draws.
fn coin(rng: &mut ChaCha8Rng, p: f64) -> bool {
    rng.gen::<f64>() < p
}

fn draw_items(
    rng: &mut ChaCha8Rng,
    n_data: usize,
    t_count: usize,
    tcfg: &TrainConfig,
) -> Vec<ItemDraw> {
    (0..tcfg.batch_size)
        .map(|_| ItemDraw {
            idx: rng.gen_range(0..n_data),
            flip: coin(rng, tcfg.flip_prob),
            t: rng.gen_range(0..t_count),
            drop_prompt: coin(rng, tcfg.cfg_dropout),
        })
        .collect()
}

fn check_finite(loss: f64, step: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(CoreError::Diverged(format!(
            "non-finite loss {loss} at step {step}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Stage one: base pretraining
// ---------------------------------------------------------------------------

/// Train the base U-Net and text encoder to predict noise on normal images.
/// Every weight of both modules updates; no adapters are involved. Returns
/// the per-step loss history; `on_step` fires after each step.
pub fn pretrain<F: Scalar>(
    store: &mut ParamStore<F>,
    unet: &UNet,
    text: &TextEncoder,
    sched: &NoiseSchedule,
    images: &[Image],
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    tcfg.validate()?;
    let cfg = &unet.config;
    if images.is_empty() {
        return Err(CoreError::Data("pretraining needs at least one image".into()));
    }
    for (i, img) in images.iter().enumerate() {
        let dim = img.pixels.dim();
        if dim != (cfg.image_size, cfg.image_size, 3) {
            return Err(CoreError::Shape(format!(
                "image {i} has shape {dim:?}, model expects ({0},{0},3)",
                cfg.image_size
            )));
        }
    }
    let tokens = tokenize(cfg, &tcfg.prompt)?;
    let null_tokens = vec![0usize; cfg.max_prompt_len];

    let mut trainable: Vec<ParamId> = unet.base_params();
    trainable.extend(text.params());
    let train_set: HashSet<ParamId> = trainable.iter().copied().collect();
    let mut opt = Adam::new(store, trainable, tcfg.lr);

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let (b, s) = (tcfg.batch_size, cfg.image_size);
    let mut losses = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let items = draw_items(&mut rng, images.len(), sched.t_count, tcfg);
        let mut z0 = ArrayD::<F>::zeros(IxDyn(&[b, 3, s, s]));
        for (i, it) in items.iter().enumerate() {
            z0.index_axis_mut(ndarray::Axis(0), i)
                .assign(&image_to_latent::<F>(&images[it.idx], it.flip));
        }
        let eps = standard_normal::<F>(&mut rng, &[b, 3, s, s]);
        let ts: Vec<usize> = items.iter().map(|it| it.t).collect();
        let z_t = q_sample_batch(&z0, &ts, &eps, sched)?;

        let plan = ContextPlan {
            tokens: tokens.clone(),
            null_tokens: null_tokens.clone(),
            use_null: items.iter().map(|it| it.drop_prompt).collect(),
        };
        let ts_f: Vec<f64> = ts.iter().map(|&t| t as f64).collect();

        let mut tape = Tape::new();
        let out = forward_single(&mut tape, store, unet, text, z_t, plan, None, &ts_f, None)?;
        let target = tape.constant(eps);
        let loss = tape.mse(out, target);
        let loss_val = tape.value(loss)[0].to_f64();
        check_finite(loss_val, step)?;

        store.zero_grads();
        tape.backward_filtered(loss, store, Some(&train_set));
        opt.step(store);

        losses.push(loss_val);
        on_step(step, loss_val);
    }
    Ok(losses)
}

// ---------------------------------------------------------------------------
// Stage two: dual-branch finetune
// ---------------------------------------------------------------------------

/// Train the dual model on anomaly sample pairs. Only the adapter/exchange/
/// injection/text parameters move; the base U-Net stays bitwise frozen. The
/// background stream, when enabled, reuses the whole-image noise and
/// timestep of its sample. Returns the per-step joint loss history.
pub fn finetune<F: Scalar>(
    store: &mut ParamStore<F>,
    model: &DualModel,
    sched: &NoiseSchedule,
    data: &[SamplePair],
    tcfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    tcfg.validate()?;
    let cfg = model.config();
    if data.is_empty() {
        return Err(CoreError::Data("finetuning needs at least one sample pair".into()));
    }
    for (i, pair) in data.iter().enumerate() {
        for (what, img) in [
            ("image", &pair.image),
            ("anomaly_part", &pair.anomaly_part),
            ("background", &pair.background),
        ] {
            let dim = img.pixels.dim();
            if dim != (cfg.image_size, cfg.image_size, 3) {
                return Err(CoreError::Shape(format!(
                    "sample {i} {what} has shape {dim:?}, model expects ({0},{0},3)",
                    cfg.image_size
                )));
            }
        }
    }
    let prompts = PromptPair::new(cfg, &tcfg.prompt, &tcfg.part_prompt)?;

    let trainable = model.trainable_params();
    let train_set = model.trainable_set();
    let mut opt = Adam::new(store, trainable, tcfg.lr);

    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let (b, s) = (tcfg.batch_size, cfg.image_size);
    let with_bg = model.with_background();
    let mut losses = Vec::with_capacity(tcfg.steps);

    for step in 0..tcfg.steps {
        let items = draw_items(&mut rng, data.len(), sched.t_count, tcfg);
        let mut z0_g = ArrayD::<F>::zeros(IxDyn(&[b, 3, s, s]));
        let mut z0_a = ArrayD::<F>::zeros(IxDyn(&[b, 3, s, s]));
        let mut z0_b = ArrayD::<F>::zeros(IxDyn(&[b, 3, s, s]));
        for (i, it) in items.iter().enumerate() {
            let pair = &data[it.idx];
            z0_g.index_axis_mut(ndarray::Axis(0), i)
                .assign(&image_to_latent::<F>(&pair.image, it.flip));
            z0_a.index_axis_mut(ndarray::Axis(0), i)
                .assign(&image_to_latent::<F>(&pair.anomaly_part, it.flip));
            if with_bg {
                z0_b.index_axis_mut(ndarray::Axis(0), i)
                    .assign(&image_to_latent::<F>(&pair.background, it.flip));
            }
        }
        let eps_g = standard_normal::<F>(&mut rng, &[b, 3, s, s]);
        let eps_a = standard_normal::<F>(&mut rng, &[b, 3, s, s]);
        let ts: Vec<usize> = items.iter().map(|it| it.t).collect();

        let z_g = q_sample_batch(&z0_g, &ts, &eps_g, sched)?;
        let z_a = q_sample_batch(&z0_a, &ts, &eps_a, sched)?;
        let z_b = if with_bg {
            Some(q_sample_batch(&z0_b, &ts, &eps_g, sched)?)
        } else {
            None
        };

        let drops: Vec<bool> = items.iter().map(|it| it.drop_prompt).collect();
        let batch = DualBatch {
            z_g,
            z_a,
            z_b,
            plan_g: ContextPlan {
                tokens: prompts.p_tokens.clone(),
                null_tokens: prompts.null_tokens.clone(),
                use_null: drops.clone(),
            },
            plan_a: ContextPlan {
                tokens: prompts.p_prime_tokens.clone(),
                null_tokens: prompts.null_tokens.clone(),
                use_null: drops,
            },
            ts: ts.iter().map(|&t| t as f64).collect(),
        };

        let mut tape = Tape::new();
        let (eg, ea) = dual_forward(&mut tape, store, model, &batch, None)?;
        let loss = dual_loss(&mut tape, eg, &eps_g, ea, &eps_a);
        let loss_val = tape.value(loss)[0].to_f64();
        check_finite(loss_val, step)?;

        store.zero_grads();
        tape.backward_filtered(loss, store, Some(&train_set));
        opt.step(store);

        losses.push(loss_val);
        on_step(step, loss_val);
    }
    Ok(losses)
}
