//! Evaluation toolkit: compact perceptual features and cluster diversity,
//! threshold-curve metrics with pinned tie conventions, a small trainable
//! segmentation detector, and dataset-level mask statistics.

use ndarray::{Array2, ArrayD, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::layers::{Conv2dLayer, GroupNormLayer};
use crate::maskgen::mask_stats;
use crate::num::Scalar;
use crate::optim::Adam;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Id, Tape};
use crate::train::image_to_latent;
use crate::types::{BinaryMask, Image};

// ---------------------------------------------------------------------------
// Compact image features and diversity
// ---------------------------------------------------------------------------

/// 64-dimensional descriptor: grayscale (channel mean) block-averaged to
/// 8×8, mean-subtracted, then L2-normalized. A flat image maps to the zero
/// vector: centering round-off can leave a ~1e-16 residue, so norms below
/// 1e-9 are treated as flat rather than normalized into pure noise. Image
/// height and width must be multiples of 8.
pub fn image_feature(img: &Image) -> Result<Vec<f64>> {
    let (h, w, _) = img.pixels.dim();
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(CoreError::Shape(format!(
            "image_feature needs sides that are positive multiples of 8, got {h}×{w}"
        )));
    }
    let (by, bx) = (h / 8, w / 8);
    let mut f = vec![0.0f64; 64];
    for cy in 0..8 {
        for cx in 0..8 {
            let mut acc = 0.0;
            for y in 0..by {
                for x in 0..bx {
                    let (py, px) = (cy * by + y, cx * bx + x);
                    acc += (img.pixels[[py, px, 0]]
                        + img.pixels[[py, px, 1]]
                        + img.pixels[[py, px, 2]])
                        / 3.0;
                }
            }
            f[cy * 8 + cx] = acc / (by * bx) as f64;
        }
    }
    let mean = f.iter().sum::<f64>() / 64.0;
    for v in &mut f {
        *v -= mean;
    }
    let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 1e-9 {
        for v in &mut f {
            *v /= norm;
        }
    } else {
        f = vec![0.0; 64];
    }
    Ok(f)
}

/// Euclidean distance between two descriptors.
pub fn feature_distance(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "feature length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn image_distance(a: &Image, b: &Image) -> Result<f64> {
    Ok(feature_distance(&image_feature(a)?, &image_feature(b)?))
}

pub type FeatureExtractor = fn(&Image) -> Result<Vec<f64>>;

/// A pluggable image descriptor paired with the Euclidean metric. The
/// default extractor is [`image_feature`]; tests and callers may swap in
/// their own to probe metric properties directly.
#[derive(Clone, Copy)]
pub struct FeatureDistance {
    pub extractor: FeatureExtractor,
}

impl FeatureDistance {
    pub fn desk_default() -> Self {
        FeatureDistance { extractor: image_feature }
    }

    pub fn between(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(feature_distance(&(self.extractor)(a)?, &(self.extractor)(b)?))
    }
}

/// Intra-cluster diversity: each generated image joins the cluster of its
/// nearest target (ties to the earlier target); a cluster's score is the
/// mean distance from its members to that cluster's target, 0 for a cluster
/// left empty; the result averages the scores over all targets.
pub fn ic_diversity(generated: &[Image], targets: &[Image], dist: &FeatureDistance) -> Result<f64> {
    if targets.is_empty() {
        return Err(CoreError::Argument("ic_diversity needs at least one target".into()));
    }
    if generated.is_empty() {
        return Err(CoreError::Argument(
            "ic_diversity needs at least one generated image".into(),
        ));
    }
    let tf: Vec<Vec<f64>> = targets.iter().map(|t| (dist.extractor)(t)).collect::<Result<_>>()?;
    let gf: Vec<Vec<f64>> = generated.iter().map(|g| (dist.extractor)(g)).collect::<Result<_>>()?;
    let mut sums = vec![0.0f64; targets.len()];
    let mut counts = vec![0usize; targets.len()];
    for g in &gf {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (ti, t) in tf.iter().enumerate() {
            let d = feature_distance(g, t);
            if d < best_d {
                best_d = d;
                best = ti;
            }
        }
        sums[best] += best_d;
        counts[best] += 1;
    }
    let mut total = 0.0;
    for (s, &c) in sums.iter().zip(&counts) {
        if c > 0 {
            total += s / c as f64;
        }
    }
    Ok(total / targets.len() as f64)
}

// ---------------------------------------------------------------------------
// Threshold-curve metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveMetrics {
    pub auroc: f64,
    pub average_precision: f64,
    pub f1_max: f64,
}

/// Ranking metrics over binary labels with fully pinned conventions:
///
/// * AUROC uses midranks, so tied scores contribute ½ per discordant pair.
/// * Average precision and F1 sweep the distinct scores as thresholds in
///   descending order, predicting positive at `score ≥ threshold`; AP is the
///   un-interpolated step sum Σ Δrecall·precision, and F1 at a threshold
///   with zero true positives is 0.
/// * Precision is `tp/(tp+fp)`, recall `tp/P`, F1 `2·p·r/(p+r)`, each as a
///   single f64 division of exact integer counts.
///
/// Errors: length mismatch, empty input, non-finite scores, or labels that
/// are all one class.
pub fn binary_curve_metrics(scores: &[f64], labels: &[bool]) -> Result<CurveMetrics> {
    if scores.len() != labels.len() {
        return Err(CoreError::Argument(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(CoreError::Argument("no scores".into()));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(CoreError::Argument("scores must be finite".into()));
    }
    let p = labels.iter().filter(|&&l| l).count();
    let n = labels.len() - p;
    if p == 0 || n == 0 {
        return Err(CoreError::Eval(
            "curve metrics need both a positive and a negative example".into(),
        ));
    }

    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));

    // AUROC from positive midranks over the ascending order.
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            j += 1;
        }
        let midrank = (i + 1 + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if labels[k] {
                rank_sum_pos += midrank;
            }
        }
        i = j;
    }
    let auroc =
        (rank_sum_pos - p as f64 * (p as f64 + 1.0) / 2.0) / (p as f64 * n as f64);

    // One descending pass with running counts; evaluate at each distinct
    // score after absorbing its whole tie group.
    let total = idx.len();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0f64;
    let mut f1_max = 0.0f64;
    let mut prev_recall = 0.0f64;
    let mut i = 0;
    while i < total {
        let threshold = scores[idx[total - 1 - i]];
        let mut j = i;
        while j < total && scores[idx[total - 1 - j]] == threshold {
            if labels[idx[total - 1 - j]] {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / p as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        let f1 = if tp == 0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        if f1 > f1_max {
            f1_max = f1;
        }
        i = j;
    }

    Ok(CurveMetrics { auroc, average_precision: ap, f1_max })
}

// ---------------------------------------------------------------------------
// Segmentation detector
// ---------------------------------------------------------------------------

/// A deliberately small encoder–decoder with skip connections and no
/// attention, predicting a per-pixel anomaly logit. Its final 1×1 conv is
/// zero-initialized, so an untrained detector scores every pixel identically
/// (AUROC exactly ½ under the midrank convention).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DetectorConfig {
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub norm_groups: usize,
}

impl DetectorConfig {
    pub fn desk_default() -> Self {
        DetectorConfig {
            in_channels: 3,
            base_channels: 16,
            channel_multipliers: vec![1, 2, 4],
            norm_groups: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() {
            return Err(CoreError::Config("channel_multipliers must be nonempty".into()));
        }
        for (l, &m) in self.channel_multipliers.iter().enumerate() {
            let ch = self.base_channels * m;
            if ch == 0 || ch % self.norm_groups != 0 {
                return Err(CoreError::Config(format!(
                    "detector level {l} channels {ch} not divisible by norm groups {}",
                    self.norm_groups
                )));
            }
        }
        Ok(())
    }

    /// Input sides must be divisible by this.
    pub fn size_divisor(&self) -> usize {
        1 << (self.channel_multipliers.len() - 1)
    }
}

pub struct Detector {
    pub config: DetectorConfig,
    stem: Conv2dLayer,
    enc: Vec<(Conv2dLayer, GroupNormLayer)>,
    downs: Vec<Conv2dLayer>,
    ups: Vec<Conv2dLayer>,
    dec: Vec<(Conv2dLayer, GroupNormLayer)>,
    out: Conv2dLayer,
}

impl Detector {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        config: DetectorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let chans: Vec<usize> =
            config.channel_multipliers.iter().map(|m| config.base_channels * m).collect();
        let levels = chans.len();
        let stem = Conv2dLayer::new(store, "det.stem", config.in_channels, chans[0], 3, 1, 1, rng);
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for (l, &c) in chans.iter().enumerate() {
            let conv = Conv2dLayer::new(store, &format!("det.enc{l}.conv"), c, c, 3, 1, 1, rng);
            let norm = GroupNormLayer::new(store, &format!("det.enc{l}.norm"), c, config.norm_groups);
            enc.push((conv, norm));
            if l + 1 < levels {
                downs.push(Conv2dLayer::new(
                    store,
                    &format!("det.down{l}"),
                    c,
                    chans[l + 1],
                    3,
                    2,
                    1,
                    rng,
                ));
            }
        }
        let mut ups = Vec::new();
        let mut dec = Vec::new();
        for l in (0..levels - 1).rev() {
            ups.push(Conv2dLayer::new(
                store,
                &format!("det.up{l}"),
                chans[l + 1],
                chans[l],
                3,
                1,
                1,
                rng,
            ));
            let conv = Conv2dLayer::new(
                store,
                &format!("det.dec{l}.conv"),
                2 * chans[l],
                chans[l],
                3,
                1,
                1,
                rng,
            );
            let norm =
                GroupNormLayer::new(store, &format!("det.dec{l}.norm"), chans[l], config.norm_groups);
            dec.push((conv, norm));
        }
        let out = Conv2dLayer::zeros(store, "det.out", chans[0], 1, 1, 1, 0);
        Ok(Detector { config, stem, enc, downs, ups, dec, out })
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.stem.params();
        for (c, n) in &self.enc {
            p.extend(c.params());
            p.extend(n.params());
        }
        for d in &self.downs {
            p.extend(d.params());
        }
        for u in &self.ups {
            p.extend(u.params());
        }
        for (c, n) in &self.dec {
            p.extend(c.params());
            p.extend(n.params());
        }
        p.extend(self.out.params());
        p
    }

    /// (B, in_channels, H, W) → per-pixel logits (B, 1, H, W).
    pub fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        store: &ParamStore<F>,
        x: ArrayD<F>,
    ) -> Result<Id> {
        let shape = x.shape().to_vec();
        let div = self.config.size_divisor();
        if shape.len() != 4
            || shape[1] != self.config.in_channels
            || shape[2] % div != 0
            || shape[3] % div != 0
            || shape[2] == 0
            || shape[3] == 0
        {
            return Err(CoreError::Shape(format!(
                "detector input must be (B,{},H,W) with H and W positive multiples of {div}, got {shape:?}",
                self.config.in_channels
            )));
        }
        let levels = self.enc.len();
        let x = t.constant(x);
        let mut h = self.stem.forward(t, store, x);
        h = t.silu(h);
        let mut skips = Vec::new();
        for (l, (conv, norm)) in self.enc.iter().enumerate() {
            h = conv.forward(t, store, h);
            h = norm.forward(t, store, h);
            h = t.silu(h);
            if l + 1 < levels {
                skips.push(h);
                h = self.downs[l].forward(t, store, h);
                h = t.silu(h);
            }
        }
        for (i, l) in (0..levels - 1).rev().enumerate() {
            h = t.upsample2x(h);
            h = self.ups[i].forward(t, store, h);
            h = t.silu(h);
            h = t.concat(1, &[h, skips[l]]);
            let (conv, norm) = &self.dec[i];
            h = conv.forward(t, store, h);
            h = norm.forward(t, store, h);
            h = t.silu(h);
        }
        Ok(self.out.forward(t, store, h))
    }
}

// ---------------------------------------------------------------------------
// Detector training and evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct DetectorTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub flip_prob: f64,
    /// Independent seeded restarts; the restart with the best validation
    /// average precision wins (ties keep the earlier restart).
    pub repeats: usize,
    pub seed: u64,
}

impl DetectorTrainConfig {
    pub fn desk_default() -> Self {
        DetectorTrainConfig {
            steps: 240,
            batch_size: 8,
            lr: 2e-3,
            flip_prob: 0.5,
            repeats: 3,
            seed: 31,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.repeats == 0 {
            return Err(CoreError::Config(
                "detector training needs a positive batch size and repeat count".into(),
            ));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CoreError::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(CoreError::Config(format!("flip_prob must lie in [0,1], got {}", self.flip_prob)));
        }
        Ok(())
    }
}

pub struct TrainedDetector {
    pub store: ParamStore<f32>,
    pub detector: Detector,
    pub val_average_precision: f64,
    pub chosen_repeat: usize,
    pub losses: Vec<f64>,
    /// Degenerate-but-allowed situations, e.g. training with zero steps.
    pub warnings: Vec<String>,
}

fn check_detector_data(
    what: &str,
    data: &[(Image, BinaryMask)],
    cfg: &DetectorConfig,
) -> Result<()> {
    if data.is_empty() {
        return Err(CoreError::Data(format!("{what} set is empty")));
    }
    let div = cfg.size_divisor();
    for (i, (img, mask)) in data.iter().enumerate() {
        let (h, w, _) = img.pixels.dim();
        if h == 0 || w == 0 || h % div != 0 || w % div != 0 {
            return Err(CoreError::Shape(format!(
                "{what} image {i} is {h}×{w}; sides must be positive multiples of {div}"
            )));
        }
        if mask.pixels.dim() != (h, w) {
            return Err(CoreError::Shape(format!(
                "{what} mask {i} is {:?}, image is {h}×{w}",
                mask.pixels.dim()
            )));
        }
    }
    Ok(())
}

/// Mask to a channels-first f32 target plane, honoring a horizontal flip.
fn mask_to_target(mask: &BinaryMask, flip: bool) -> Array2<f32> {
    let (h, w) = mask.pixels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sx = if flip { w - 1 - x } else { x };
        if mask.pixels[[y, sx]] != 0 {
            1.0
        } else {
            0.0
        }
    })
}

/// Train the detector on image/mask pairs with seeded restarts; the restart
/// with the best validation pixel average precision is returned. Zero steps
/// is allowed and returns an untrained detector with a warning.
pub fn train_detector(
    cfg: &DetectorConfig,
    tcfg: &DetectorTrainConfig,
    train: &[(Image, BinaryMask)],
    val: &[(Image, BinaryMask)],
) -> Result<TrainedDetector> {
    cfg.validate()?;
    tcfg.validate()?;
    check_detector_data("training", train, cfg)?;
    check_detector_data("validation", val, cfg)?;
    if train.len() < 10 {
        return Err(CoreError::Data(format!(
            "detector training needs at least 10 images, got {}",
            train.len()
        )));
    }
    if train.iter().all(|(_, m)| m.is_empty()) {
        return Err(CoreError::Config(
            "every training mask is empty; the detector has nothing positive to learn".into(),
        ));
    }
    let mut warnings = Vec::new();
    if tcfg.steps == 0 {
        warnings.push("zero training steps requested; returning an untrained detector".to_string());
    }
    let (h, w, _) = train[0].0.pixels.dim();
    for (what, set) in [("training", train), ("validation", val)] {
        for (i, (img, _)) in set.iter().enumerate() {
            if img.pixels.dim() != (h, w, 3) {
                return Err(CoreError::Shape(format!(
                    "{what} image {i} is {:?}; all images must match the first ({h}×{w})",
                    img.pixels.dim()
                )));
            }
        }
    }

    let mut best: Option<TrainedDetector> = None;
    for repeat in 0..tcfg.repeats {
        let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed.wrapping_add(repeat as u64));
        let mut store = ParamStore::<f32>::new();
        let detector = Detector::new(&mut store, cfg.clone(), &mut rng)?;
        let mut opt = Adam::new(&store, detector.params(), tcfg.lr);
        let mut losses = Vec::with_capacity(tcfg.steps);

        for step in 0..tcfg.steps {
            let b = tcfg.batch_size;
            let mut x = ArrayD::<f32>::zeros(IxDyn(&[b, 3, h, w]));
            let mut target = ArrayD::<f32>::zeros(IxDyn(&[b, 1, h, w]));
            for i in 0..b {
                let idx = rng.gen_range(0..train.len());
                let flip = rng.gen::<f64>() < tcfg.flip_prob;
                let (img, mask) = &train[idx];
                x.index_axis_mut(Axis(0), i).assign(&image_to_latent::<f32>(img, flip));
                target
                    .index_axis_mut(Axis(0), i)
                    .index_axis_mut(Axis(0), 0)
                    .assign(&mask_to_target(mask, flip));
            }
            let mut tape = Tape::new();
            let logits = detector.forward(&mut tape, &store, x)?;
            let tgt = tape.constant(target);
            let loss = tape.bce_with_logits(logits, tgt);
            let loss_val = tape.value(loss)[0] as f64;
            if !loss_val.is_finite() {
                return Err(CoreError::Diverged(format!(
                    "detector restart {repeat}: non-finite loss {loss_val} at step {step}"
                )));
            }
            store.zero_grads();
            tape.backward(loss, &mut store);
            opt.step(&mut store);
            losses.push(loss_val);
        }

        let metrics = evaluate_pixel_metrics(&store, &detector, val)?;
        let candidate = TrainedDetector {
            store,
            detector,
            val_average_precision: metrics.average_precision,
            chosen_repeat: repeat,
            losses,
            warnings: warnings.clone(),
        };
        let better = match &best {
            None => true,
            Some(b) => candidate.val_average_precision > b.val_average_precision,
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best.expect("repeats ≥ 1"))
}

/// Per-pixel anomaly probabilities (sigmoid of the logits) for one image.
pub fn detector_scores(
    store: &ParamStore<f32>,
    detector: &Detector,
    img: &Image,
) -> Result<Array2<f64>> {
    let (h, w, _) = img.pixels.dim();
    let mut x = ArrayD::<f32>::zeros(IxDyn(&[1, 3, h, w]));
    x.index_axis_mut(Axis(0), 0).assign(&image_to_latent::<f32>(img, false));
    let mut tape = Tape::new();
    let logits = detector.forward(&mut tape, store, x)?;
    let v = tape.value(logits);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| {
        let z = v[[0, 0, y, x]] as f64;
        1.0 / (1.0 + (-z).exp())
    }))
}

/// Pixel-level curve metrics of a detector over a whole labeled set.
pub fn evaluate_pixel_metrics(
    store: &ParamStore<f32>,
    detector: &Detector,
    data: &[(Image, BinaryMask)],
) -> Result<CurveMetrics> {
    check_detector_data("evaluation", data, &detector.config)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (img, mask) in data {
        let map = detector_scores(store, detector, img)?;
        for ((y, x), &s) in map.indexed_iter() {
            scores.push(s);
            labels.push(mask.pixels[[y, x]] != 0);
        }
    }
    binary_curve_metrics(&scores, &labels)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionMetrics {
    /// All test pixels pooled.
    pub pixel: CurveMetrics,
    /// One score per image (its maximum pixel score); an image is positive
    /// when its mask is nonempty.
    pub image: CurveMetrics,
}

/// Full localization + detection metrics; the test set must contain both an
/// anomalous and a normal image for the image-level half to be defined.
pub fn evaluate_detector(
    store: &ParamStore<f32>,
    detector: &Detector,
    data: &[(Image, BinaryMask)],
) -> Result<DetectionMetrics> {
    check_detector_data("evaluation", data, &detector.config)?;
    let mut px_scores = Vec::new();
    let mut px_labels = Vec::new();
    let mut im_scores = Vec::new();
    let mut im_labels = Vec::new();
    for (img, mask) in data {
        let map = detector_scores(store, detector, img)?;
        let mut peak = f64::NEG_INFINITY;
        for ((y, x), &s) in map.indexed_iter() {
            px_scores.push(s);
            px_labels.push(mask.pixels[[y, x]] != 0);
            if s > peak {
                peak = s;
            }
        }
        im_scores.push(peak);
        im_labels.push(!mask.is_empty());
    }
    Ok(DetectionMetrics {
        pixel: binary_curve_metrics(&px_scores, &px_labels)?,
        image: binary_curve_metrics(&im_scores, &im_labels)?,
    })
}

// ---------------------------------------------------------------------------
// Dataset-level mask statistics
// ---------------------------------------------------------------------------

/// Fraction of masks with at least one set pixel; an empty slice gives 0.
pub fn nonempty_mask_fraction(masks: &[BinaryMask]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    masks.iter().filter(|m| !m.is_empty()).count() as f64 / masks.len() as f64
}

/// Mean, over pairs whose mask is nonempty, of the fraction of mask pixels
/// lying inside the paired object region. No nonempty masks → 0.
pub fn inside_object_fraction_mean(
    masks: &[BinaryMask],
    objects: &[BinaryMask],
) -> Result<f64> {
    if masks.len() != objects.len() {
        return Err(CoreError::Argument(format!(
            "{} masks vs {} object regions",
            masks.len(),
            objects.len()
        )));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (m, o) in masks.iter().zip(objects) {
        if m.is_empty() {
            continue;
        }
        acc += mask_stats(m, Some(o))?.inside_object_fraction;
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { acc / n as f64 })
}

/// Pixels whose brightest channel exceeds `threshold` — the object-ish
/// region of a generated image whose palette separates object from
/// background by brightness.
pub fn bright_region(img: &Image, threshold: f64) -> BinaryMask {
    let (h, w, _) = img.pixels.dim();
    let mut mask = BinaryMask::empty(h, w);
    for y in 0..h {
        for x in 0..w {
            let mx =
                img.pixels[[y, x, 0]].max(img.pixels[[y, x, 1]]).max(img.pixels[[y, x, 2]]);
            if mx > threshold {
                mask.pixels[[y, x]] = 1;
            }
        }
    }
    mask
}

/// Median grayscale intensity pooled over every pixel of every image. Even
/// pixel counts average the two middle values.
pub fn median_gray(images: &[Image]) -> Result<f64> {
    if images.is_empty() {
        return Err(CoreError::Argument("median_gray needs at least one image".into()));
    }
    let mut v: Vec<f64> = Vec::new();
    for img in images {
        v.extend(img.grayscale().iter().copied());
    }
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite intensities"));
    let n = v.len();
    Ok(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskAlignment {
    /// Mean, over pairs with a nonempty mask, of the fraction of mask pixels
    /// whose grayscale differs from the reference normal median by more than
    /// `tau`. Ground truth is unavailable for generated pairs, so this
    /// intensity-deviation fraction stands in for a mask/defect IoU.
    pub alignment_mean: f64,
    pub nonempty_mask_fraction: f64,
    pub inside_object_fraction_mean: f64,
}

/// How well extracted masks line up with visibly deviating pixels of the
/// whole images. `median_normal` is the reference intensity of defect-free
/// data (see [`median_gray`]); `objects` gives the per-image object region
/// for the inside-object fraction.
pub fn mask_alignment(
    images: &[Image],
    masks: &[BinaryMask],
    objects: &[BinaryMask],
    median_normal: f64,
    tau: f64,
) -> Result<MaskAlignment> {
    if images.len() != masks.len() || masks.len() != objects.len() {
        return Err(CoreError::Argument(format!(
            "{} images vs {} masks vs {} object regions",
            images.len(),
            masks.len(),
            objects.len()
        )));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(CoreError::Argument(format!("tau must be positive and finite, got {tau}")));
    }
    let mut acc = 0.0;
    let mut n = 0usize;
    for (img, mask) in images.iter().zip(masks) {
        if mask.is_empty() {
            continue;
        }
        let (h, w, _) = img.pixels.dim();
        if mask.pixels.dim() != (h, w) {
            return Err(CoreError::Shape(format!(
                "mask {:?} does not match image {h}×{w}",
                mask.pixels.dim()
            )));
        }
        let gray = img.grayscale();
        let mut deviating = 0usize;
        for ((y, x), &m) in mask.pixels.indexed_iter() {
            if m != 0 && (gray[[y, x]] - median_normal).abs() > tau {
                deviating += 1;
            }
        }
        acc += deviating as f64 / mask.area() as f64;
        n += 1;
    }
    Ok(MaskAlignment {
        alignment_mean: if n == 0 { 0.0 } else { acc / n as f64 },
        nonempty_mask_fraction: nonempty_mask_fraction(masks),
        inside_object_fraction_mean: inside_object_fraction_mean(masks, objects)?,
    })
}

// ---------------------------------------------------------------------------
// Evaluation report
// ---------------------------------------------------------------------------

/// The full desk evaluation summary. `mask_iou_mean` carries the
/// [`MaskAlignment::alignment_mean`] score: generated pairs have no ground
/// truth mask, so an intensity-deviation alignment fraction stands in for a
/// literal IoU while keeping the same [0,1] reading (higher = better
/// aligned).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    pub ic_diversity: f64,
    pub mask_iou_mean: f64,
    pub pixel_auroc: f64,
    pub pixel_ap: f64,
    pub pixel_f1max: f64,
    pub image_auroc: f64,
    pub image_ap: f64,
    pub image_f1max: f64,
    pub nonempty_mask_fraction: f64,
}

impl EvalReport {
    /// Every metric must land in [0,1].
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.entries() {
            if !(0.0..=1.0).contains(&v) {
                return Err(CoreError::Eval(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(&'static str, f64)> {
        vec![
            ("ic_diversity", self.ic_diversity),
            ("mask_iou_mean", self.mask_iou_mean),
            ("pixel_auroc", self.pixel_auroc),
            ("pixel_ap", self.pixel_ap),
            ("pixel_f1max", self.pixel_f1max),
            ("image_auroc", self.image_auroc),
            ("image_ap", self.image_ap),
            ("image_f1max", self.image_f1max),
            ("nonempty_mask_fraction", self.nonempty_mask_fraction),
        ]
    }

    /// Flat `key value` lines, one metric per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.entries() {
            out.push_str(&format!("{name} {v}\n"));
        }
        out
    }
}
