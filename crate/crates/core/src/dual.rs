//! Dual-branch model: two adapter sets over one frozen U-Net, coupled at
//! every attention site by a shared 2-token attention exchange, plus an
//! optional background-feature injection into the global branch's
//! self-attention keys and values.

use std::collections::HashSet;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{
    forward_streams, BranchAdapters, ContextPlan, DenoiserConfig, ForwardTaps, SiteKind,
    StreamHook, StreamInput, TextEncoder, UNet,
};
use crate::error::{CoreError, Result};
use crate::layers::Linear;
use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Id, Tape};

// ---------------------------------------------------------------------------
// Feature-sharing site (2-token attention across the two branches)
// ---------------------------------------------------------------------------

/// Per-site weights for the cross-branch exchange. Output projection starts
/// at zero so a fresh site leaves both branches untouched.
pub struct SaimSite {
    pub site_id: String,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl SaimSite {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        site_id: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = |proj: &str| format!("saim.{site_id}.{proj}");
        SaimSite {
            site_id: site_id.to_string(),
            wq: Linear::new(store, &p("q"), channels, channels, false, rng),
            wk: Linear::new(store, &p("k"), channels, channels, false, rng),
            wv: Linear::new(store, &p("v"), channels, channels, false, rng),
            wo: Linear::zeros(store, &p("o"), channels, channels, false),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        for lin in [&self.wq, &self.wk, &self.wv, &self.wo] {
            p.extend(lin.params());
        }
        p
    }
}

/// Joint update of the two branches' features at one site.
///
/// Both (B,C,H,W) features are flattened to per-position vectors, stacked to
/// (B·H·W, 2, C) sequences, passed through one shared self-attention with the
/// site's weights, residually added to the pre-attention stack, and split
/// back. Spatial positions never mix: position p of either output depends
/// only on position p of both inputs.
pub fn saim_share<F: Scalar>(
    t: &mut Tape<F>,
    store: &ParamStore<F>,
    site: &SaimSite,
    feat_g: Id,
    feat_a: Id,
) -> (Id, Id) {
    let shape = t.value(feat_g).shape().to_vec();
    assert_eq!(shape, t.value(feat_a).shape(), "branch features must agree in shape");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let hw = h * w;

    let to_tokens = |t: &mut Tape<F>, f: Id| -> Id {
        let r = t.reshape(f, &[b, c, hw]);
        let p = t.permute(r, &[0, 2, 1]);
        t.reshape(p, &[b * hw, 1, c])
    };
    let tg = to_tokens(t, feat_g);
    let ta = to_tokens(t, feat_a);
    let stack = t.concat(1, &[tg, ta]);

    let q = site.wq.forward(t, store, stack);
    let k = site.wk.forward(t, store, stack);
    let v = site.wv.forward(t, store, stack);
    let att = crate::layers::multihead_attention(t, q, k, v, 1);
    let o = site.wo.forward(t, store, att.ctx);
    let out = t.add(stack, o);

    let from_tokens = |t: &mut Tape<F>, token: usize| -> Id {
        let s = t.slice(out, 1, token, 1);
        let r = t.reshape(s, &[b, hw, c]);
        let p = t.permute(r, &[0, 2, 1]);
        t.reshape(p, &[b, c, h, w])
    };
    (from_tokens(t, 0), from_tokens(t, 1))
}

// ---------------------------------------------------------------------------
// Background injection site
// ---------------------------------------------------------------------------

/// Gated background fusion for one self-attention site of the global branch.
/// The key/value source becomes `x + γ·MLP(φ_b)` while queries keep reading
/// the unfused `x`; γ starts at 0.1 and the MLP's second layer at zero, so a
/// fresh site changes nothing.
pub struct BcmSite {
    pub site_id: String,
    pub gamma: ParamId,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BcmSite {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        site_id: &str,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gamma = store.register(
            format!("bcm.{site_id}.gamma"),
            ArrayD::from_elem(ndarray::IxDyn(&[1]), F::from_f64(0.1)),
        );
        let fc1 = Linear::new(store, &format!("bcm.{site_id}.fc1"), channels, channels, true, rng);
        let fc2 = Linear::zeros(store, &format!("bcm.{site_id}.fc2"), channels, channels, true);
        BcmSite { site_id: site_id.to_string(), gamma, fc1, fc2 }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.gamma];
        p.extend(self.fc1.params());
        p.extend(self.fc2.params());
        p
    }
}

/// fused = x_tokens + γ·MLP(background feature), token-wise.
pub fn bcm_fuse<F: Scalar>(
    t: &mut Tape<F>,
    store: &ParamStore<F>,
    site: &BcmSite,
    x_tokens: Id,
    bg_feat: Id,
) -> Id {
    let shape = t.value(bg_feat).shape().to_vec();
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let r = t.reshape(bg_feat, &[b, c, h * w]);
    let seq = t.permute(r, &[0, 2, 1]);
    let h1 = site.fc1.forward(t, store, seq);
    let h1 = t.silu(h1);
    let m = site.fc2.forward(t, store, h1);
    let gamma = t.param(store, site.gamma);
    let gm = t.scale_by(m, gamma);
    t.add(x_tokens, gm)
}

// ---------------------------------------------------------------------------
// The combined model
// ---------------------------------------------------------------------------

pub struct DualModel {
    pub unet: UNet,
    pub text: TextEncoder,
    pub global: BranchAdapters,
    pub anomaly: BranchAdapters,
    /// One exchange site per attention site, same order as `unet.sites`.
    pub saim: Vec<SaimSite>,
    /// Background injection, present per self-attention site when enabled.
    pub bcm: Option<Vec<Option<BcmSite>>>,
}

impl DualModel {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: DenoiserConfig,
        with_background: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let unet = UNet::new(store, cfg.clone(), rng)?;
        let text = TextEncoder::new(store, &cfg, rng);
        let global = BranchAdapters::new(store, &unet, "g", rng);
        let anomaly = BranchAdapters::new(store, &unet, "a", rng);
        let saim = unet
            .sites
            .iter()
            .map(|s| SaimSite::new(store, &s.site_id, s.channels, rng))
            .collect();
        let bcm = with_background.then(|| {
            unet.sites
                .iter()
                .map(|s| {
                    matches!(s.kind, SiteKind::SelfAttn)
                        .then(|| BcmSite::new(store, &s.site_id, s.channels, rng))
                })
                .collect()
        });
        Ok(DualModel { unet, text, global, anomaly, saim, bcm })
    }

    pub fn with_background(&self) -> bool {
        self.bcm.is_some()
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.unet.config
    }

    /// Everything the finetune stage updates: both adapter sets, the text
    /// encoder, the exchange sites, and the background injection. Base U-Net
    /// weights are deliberately absent.
    pub fn trainable_params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.global.lora_params());
        p.extend(self.anomaly.lora_params());
        p.extend(self.text.params());
        for s in &self.saim {
            p.extend(s.params());
        }
        if let Some(bcm) = &self.bcm {
            for site in bcm.iter().flatten() {
                p.extend(site.params());
            }
        }
        p
    }

    pub fn trainable_set(&self) -> HashSet<ParamId> {
        self.trainable_params().into_iter().collect()
    }

    fn bcm_at(&self, site_idx: usize) -> Option<&BcmSite> {
        self.bcm.as_ref().and_then(|v| v[site_idx].as_ref())
    }
}

// ---------------------------------------------------------------------------
// The coupling hook
// ---------------------------------------------------------------------------

/// Streams are ordered [background?, global, anomaly]. The background stream
/// (when present) runs with the global branch's adapters and prompt, feeds
/// the key/value fusion, and is excluded from the exchange and from the loss.
pub struct DualHook<'m> {
    model: &'m DualModel,
    bg_present: bool,
    bg_feat: Option<Id>,
    couple: bool,
}

impl<'m> DualHook<'m> {
    pub fn new(model: &'m DualModel, bg_present: bool) -> Self {
        DualHook { model, bg_present, bg_feat: None, couple: true }
    }

    /// Probe constructor: disable the cross-branch exchange entirely.
    pub fn without_exchange(model: &'m DualModel, bg_present: bool) -> Self {
        DualHook { model, bg_present, bg_feat: None, couple: false }
    }

    fn branch_indices(&self) -> (usize, usize) {
        if self.bg_present {
            (1, 2)
        } else {
            (0, 1)
        }
    }
}

impl<'m, F: Scalar> StreamHook<F> for DualHook<'m> {
    fn kv_source(
        &mut self,
        t: &mut Tape<F>,
        store: &ParamStore<F>,
        site_idx: usize,
        stream: usize,
        x_tokens: Id,
    ) -> Id {
        let (global_idx, _) = self.branch_indices();
        if !self.bg_present || stream != global_idx {
            return x_tokens;
        }
        let Some(site) = self.model.bcm_at(site_idx) else {
            return x_tokens;
        };
        let bg = self.bg_feat.expect("background stream must run before the global stream");
        bcm_fuse(t, store, site, x_tokens, bg)
    }

    fn stream_attended(
        &mut self,
        _t: &mut Tape<F>,
        _store: &ParamStore<F>,
        _site_idx: usize,
        stream: usize,
        feat: Id,
    ) {
        if self.bg_present && stream == 0 {
            self.bg_feat = Some(feat);
        }
    }

    fn site_complete(
        &mut self,
        t: &mut Tape<F>,
        store: &ParamStore<F>,
        site_idx: usize,
        feats: &mut [Id],
    ) {
        if !self.couple {
            return;
        }
        let (gi, ai) = self.branch_indices();
        let (ng, na) = saim_share(t, store, &self.model.saim[site_idx], feats[gi], feats[ai]);
        feats[gi] = ng;
        feats[ai] = na;
    }
}

// ---------------------------------------------------------------------------
// Joint forward and loss
// ---------------------------------------------------------------------------

/// One training/sampling batch through both branches.
pub struct DualBatch<F: Scalar> {
    pub z_g: ArrayD<F>,
    pub z_a: ArrayD<F>,
    /// Noised background latent; required iff the model has background
    /// conditioning.
    pub z_b: Option<ArrayD<F>>,
    pub plan_g: ContextPlan,
    pub plan_a: ContextPlan,
    pub ts: Vec<f64>,
}

/// Run both branches (plus the background stream when conditioned) through
/// the shared U-Net with coupling, returning the per-branch noise estimates.
pub fn dual_forward<F: Scalar>(
    t: &mut Tape<F>,
    store: &ParamStore<F>,
    model: &DualModel,
    batch: &DualBatch<F>,
    taps: Option<&mut ForwardTaps>,
) -> Result<(Id, Id)> {
    match (model.with_background(), batch.z_b.is_some()) {
        (true, false) => {
            return Err(CoreError::Config(
                "background conditioning is enabled but no background latent was provided".into(),
            ))
        }
        (false, true) => {
            return Err(CoreError::Config(
                "background latent provided but the model has no background conditioning".into(),
            ))
        }
        _ => {}
    }
    let mut streams = Vec::new();
    if let Some(zb) = &batch.z_b {
        streams.push(StreamInput {
            z_t: zb.clone(),
            plan: batch.plan_g.clone(),
            adapters: Some(&model.global),
        });
    }
    streams.push(StreamInput {
        z_t: batch.z_g.clone(),
        plan: batch.plan_g.clone(),
        adapters: Some(&model.global),
    });
    streams.push(StreamInput {
        z_t: batch.z_a.clone(),
        plan: batch.plan_a.clone(),
        adapters: Some(&model.anomaly),
    });
    let mut hook = DualHook::new(model, batch.z_b.is_some());
    let outs = forward_streams(t, store, &model.unet, &model.text, &streams, &batch.ts, &mut hook, taps)?;
    let n = outs.len();
    Ok((outs[n - 2], outs[n - 1]))
}

/// Sum of the two branches' mean-squared noise-prediction errors.
pub fn dual_loss<F: Scalar>(
    t: &mut Tape<F>,
    eps_hat_g: Id,
    eps_g: &ArrayD<F>,
    eps_hat_a: Id,
    eps_a: &ArrayD<F>,
) -> Id {
    let tg = t.constant(eps_g.clone());
    let ta = t.constant(eps_a.clone());
    let lg = t.mse(eps_hat_g, tg);
    let la = t.mse(eps_hat_a, ta);
    t.add(lg, la)
}
