//! The ε-prediction U-Net with self/cross-attention sites, the toy trainable
//! text encoder, and per-branch low-rank adapters.
//!
//! The forward pass is written as a multi-stream walker: several latents are
//! pushed through the same architecture layer by layer, and a [`StreamHook`]
//! gets called around every attention site. Branch coupling (feature sharing,
//! background K/V injection) is implemented on top of these hooks without the
//! U-Net knowing about it.

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::layers::{
    linear_adapted, multihead_attention, sinusoidal_embedding, Conv2dLayer, GroupNormLayer,
    Linear, LoraPair,
};
use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Id, Tape};

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub attention_resolutions: Vec<usize>,
    pub heads: usize,
    pub time_embed_dim: usize,
    pub context_dim: usize,
    pub vocab: Vec<String>,
    pub lora_rank: usize,
    pub norm_groups: usize,
    pub max_prompt_len: usize,
}

impl DenoiserConfig {
    pub fn desk_default() -> Self {
        DenoiserConfig {
            image_size: 64,
            in_channels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            attention_resolutions: vec![16, 8],
            heads: 4,
            time_embed_dim: 128,
            context_dim: 64,
            vocab: default_vocab(),
            lora_rank: 4,
            norm_groups: 8,
            max_prompt_len: 8,
        }
    }

    /// Shrunken configuration for finite-difference gradient verification:
    /// every parameter class present, ~1k trainable parameters total.
    pub fn tiny_test() -> Self {
        DenoiserConfig {
            image_size: 8,
            in_channels: 3,
            base_channels: 4,
            channel_multipliers: vec![1, 1],
            attention_resolutions: vec![4, 2],
            heads: 2,
            time_embed_dim: 8,
            context_dim: 4,
            vocab: default_vocab(),
            lora_rank: 1,
            norm_groups: 2,
            max_prompt_len: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lora_rank < 1 {
            return Err(CoreError::Config("lora_rank must be ≥ 1".into()));
        }
        if self.channel_multipliers.is_empty() {
            return Err(CoreError::Config("channel_multipliers must be nonempty".into()));
        }
        for &r in &self.attention_resolutions {
            if r == 0 || self.image_size % r != 0 {
                return Err(CoreError::Config(format!(
                    "attention resolution {r} does not divide image size {}",
                    self.image_size
                )));
            }
        }
        for (l, &m) in self.channel_multipliers.iter().enumerate() {
            let ch = self.base_channels * m;
            if ch % self.norm_groups != 0 || ch % self.heads != 0 {
                return Err(CoreError::Config(format!(
                    "level {l} channels {ch} not divisible by norm groups {} and heads {}",
                    self.norm_groups, self.heads
                )));
            }
        }
        if self.vocab.is_empty() || self.vocab[0] != "<null>" {
            return Err(CoreError::Config("vocab must start with <null>".into()));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(CoreError::Config("time_embed_dim must be even".into()));
        }
        Ok(())
    }

    /// Resolution at the bottleneck, after every level has downsampled.
    pub fn middle_resolution(&self) -> usize {
        self.image_size >> self.channel_multipliers.len()
    }
}

pub fn default_vocab() -> Vec<String> {
    ["<null>", "a", "vfx", "with", "sks"].iter().map(|s| s.to_string()).collect()
}

/// Whitespace tokenizer against the fixed vocabulary, null-padded to the
/// configured maximum length.
pub fn tokenize(cfg: &DenoiserConfig, prompt: &str) -> Result<Vec<usize>> {
    let mut ids = Vec::new();
    for word in prompt.split_whitespace() {
        let id = cfg
            .vocab
            .iter()
            .position(|v| v == word)
            .ok_or_else(|| CoreError::Config(format!("unknown vocabulary token: {word:?}")))?;
        ids.push(id);
    }
    if ids.len() > cfg.max_prompt_len {
        return Err(CoreError::Config(format!(
            "prompt longer than {} tokens",
            cfg.max_prompt_len
        )));
    }
    ids.resize(cfg.max_prompt_len, 0);
    Ok(ids)
}

/// The nested prompt pair conditioning the two branches.
#[derive(Debug, Clone)]
pub struct PromptPair {
    pub p_tokens: Vec<usize>,
    pub p_prime_tokens: Vec<usize>,
    pub null_tokens: Vec<usize>,
}

impl PromptPair {
    pub fn new(cfg: &DenoiserConfig, p: &str, p_prime: &str) -> Result<Self> {
        let p_tokens = tokenize(cfg, p)?;
        let p_prime_tokens = tokenize(cfg, p_prime)?;
        let null_tokens = vec![0; cfg.max_prompt_len];
        // Nesting: every non-null token of p′ must occur in p at least as often.
        for &tok in p_prime_tokens.iter().filter(|&&t| t != 0) {
            let in_p = p_tokens.iter().filter(|&&t| t == tok).count();
            let in_pp = p_prime_tokens.iter().filter(|&&t| t == tok).count();
            if in_pp > in_p {
                return Err(CoreError::Config(format!(
                    "prompt nesting violated: token id {tok} occurs {in_pp}× in the part prompt but {in_p}× in the full prompt"
                )));
            }
        }
        Ok(PromptPair { p_tokens, p_prime_tokens, null_tokens })
    }

    pub fn desk_default(cfg: &DenoiserConfig) -> Result<Self> {
        PromptPair::new(cfg, "a vfx with sks", "sks")
    }
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

/// Token embedding + learned positions + one self-attention mixing layer.
pub struct TextEncoder {
    pub table: ParamId,
    pub pos: ParamId,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl TextEncoder {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &DenoiserConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let v = cfg.vocab.len();
        let d = cfg.context_dim;
        let table = store.register("text.embed", crate::layers::normal_init(rng, &[v, d], 0.5));
        let pos = store.register("text.pos", crate::layers::normal_init(rng, &[cfg.max_prompt_len, d], 0.1));
        let wq = Linear::new(store, "text.q", d, d, true, rng);
        let wk = Linear::new(store, "text.k", d, d, true, rng);
        let wv = Linear::new(store, "text.v", d, d, true, rng);
        let wo = Linear::new(store, "text.o", d, d, true, rng);
        TextEncoder { table, pos, wq, wk, wv, wo }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.table, self.pos];
        for lin in [&self.wq, &self.wk, &self.wv, &self.wo] {
            p.extend(lin.params());
        }
        p
    }

    /// Encode one padded token sequence to a (len, context_dim) node.
    pub fn encode<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        store: &ParamStore<F>,
        token_ids: &[usize],
        vocab_len: usize,
    ) -> Result<Id> {
        if let Some(&bad) = token_ids.iter().find(|&&id| id >= vocab_len) {
            return Err(CoreError::Config(format!(
                "token id {bad} outside vocabulary of {vocab_len}"
            )));
        }
        let table = t.param(store, self.table);
        let pos = t.param(store, self.pos);
        let e0 = t.embed(table, token_ids);
        let e = t.add(e0, pos);
        let l = token_ids.len();
        let d = t.value(e).shape()[1];
        let e3 = t.reshape(e, &[1, l, d]);
        let q = self.wq.forward(t, store, e3);
        let k = self.wk.forward(t, store, e3);
        let v = self.wv.forward(t, store, e3);
        let att = multihead_attention(t, q, k, v, 1);
        let o = self.wo.forward(t, store, att.ctx);
        let mixed = t.add(e3, o);
        Ok(t.reshape(mixed, &[l, d]))
    }
}

// ---------------------------------------------------------------------------
// U-Net structure
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteKind {
    SelfAttn,
    CrossAttn,
}

/// One attention site: norm + Q/K/V/O projections, addressed by a stable id.
pub struct AttentionSite {
    pub site_id: String,
    pub kind: SiteKind,
    pub resolution: usize,
    pub channels: usize,
    pub norm: GroupNormLayer,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl AttentionSite {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &DenoiserConfig,
        site_id: String,
        kind: SiteKind,
        resolution: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let prefix = format!("base.{site_id}");
        let norm = GroupNormLayer::new(store, &format!("{prefix}.norm"), channels, cfg.norm_groups);
        let kv_dim = match kind {
            SiteKind::SelfAttn => channels,
            SiteKind::CrossAttn => cfg.context_dim,
        };
        let wq = Linear::new(store, &format!("{prefix}.q"), channels, channels, true, rng);
        let wk = Linear::new(store, &format!("{prefix}.k"), kv_dim, channels, true, rng);
        let wv = Linear::new(store, &format!("{prefix}.v"), kv_dim, channels, true, rng);
        // Zero-init output projection: a fresh site is the identity.
        let wo = Linear::zeros(store, &format!("{prefix}.o"), channels, channels, true);
        AttentionSite { site_id, kind, resolution, channels, norm, wq, wk, wv, wo }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.norm.params();
        for lin in [&self.wq, &self.wk, &self.wv, &self.wo] {
            p.extend(lin.params());
        }
        p
    }
}

pub struct ResBlock {
    pub gn1: GroupNormLayer,
    pub conv1: Conv2dLayer,
    pub temb: Linear,
    pub gn2: GroupNormLayer,
    pub conv2: Conv2dLayer,
    pub skip: Option<Conv2dLayer>,
}

impl ResBlock {
    fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: &DenoiserConfig,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let gn1 = GroupNormLayer::new(store, &format!("{name}.gn1"), c_in, cfg.norm_groups);
        let conv1 = Conv2dLayer::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, rng);
        let temb = Linear::new(store, &format!("{name}.temb"), cfg.time_embed_dim, c_out, true, rng);
        let gn2 = GroupNormLayer::new(store, &format!("{name}.gn2"), c_out, cfg.norm_groups);
        // Zero-init second conv: a fresh block is the (projected) identity.
        let conv2 = Conv2dLayer::zeros(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1);
        let skip = (c_in != c_out)
            .then(|| Conv2dLayer::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, rng));
        ResBlock { gn1, conv1, temb, gn2, conv2, skip }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.gn1.params());
        p.extend(self.conv1.params());
        p.extend(self.temb.params());
        p.extend(self.gn2.params());
        p.extend(self.conv2.params());
        if let Some(s) = &self.skip {
            p.extend(s.params());
        }
        p
    }

    fn forward<F: Scalar>(
        &self,
        t: &mut Tape<F>,
        store: &ParamStore<F>,
        x: Id,
        temb: Id,
    ) -> Id {
        let h = self.gn1.forward(t, store, x);
        let h = t.silu(h);
        let h = self.conv1.forward(t, store, h);
        let tv = self.temb.forward(t, store, temb);
        let h = t.add_chan_vec(h, tv);
        let h = self.gn2.forward(t, store, h);
        let h = t.silu(h);
        let h = self.conv2.forward(t, store, h);
        let sc = match &self.skip {
            Some(conv) => conv.forward(t, store, x),
            None => x,
        };
        t.add(h, sc)
    }
}

struct DownLevel {
    block: ResBlock,
    /// Index of the self-attention site; the cross site is at +1.
    attn: Option<usize>,
    down: Option<Conv2dLayer>,
}

struct UpLevel {
    upconv: Conv2dLayer,
    block: ResBlock,
    attn: Option<usize>,
}

pub struct UNet {
    pub config: DenoiserConfig,
    time_fc1: Linear,
    time_fc2: Linear,
    stem: Conv2dLayer,
    downs: Vec<DownLevel>,
    mid_block1: ResBlock,
    mid_attn: Option<usize>,
    mid_block2: ResBlock,
    ups: Vec<UpLevel>,
    out_norm: GroupNormLayer,
    out_conv: Conv2dLayer,
    pub sites: Vec<AttentionSite>,
}

impl UNet {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        cfg: DenoiserConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        let te = cfg.time_embed_dim;
        let time_fc1 = Linear::new(store, "base.time.fc1", te, te, true, rng);
        let time_fc2 = Linear::new(store, "base.time.fc2", te, te, true, rng);
        let stem = Conv2dLayer::new(store, "base.stem", cfg.in_channels, cfg.base_channels, 3, 1, 1, rng);

        let mut sites = Vec::new();
        let push_site_pair = |store: &mut ParamStore<F>,
                                  sites: &mut Vec<AttentionSite>,
                                  tag: String,
                                  res: usize,
                                  ch: usize,
                                  rng: &mut ChaCha8Rng|
         -> usize {
            let idx = sites.len();
            sites.push(AttentionSite::new(
                store, &cfg, format!("{tag}_self"), SiteKind::SelfAttn, res, ch, rng,
            ));
            sites.push(AttentionSite::new(
                store, &cfg, format!("{tag}_cross"), SiteKind::CrossAttn, res, ch, rng,
            ));
            idx
        };

        let levels = cfg.channel_multipliers.len();
        let mut downs = Vec::new();
        let mut ch_in = cfg.base_channels;
        for (l, &mult) in cfg.channel_multipliers.iter().enumerate() {
            let res = cfg.image_size >> l;
            let ch = cfg.base_channels * mult;
            let block = ResBlock::new(store, &cfg, &format!("base.down{l}.res"), ch_in, ch, rng);
            let attn = cfg
                .attention_resolutions
                .contains(&res)
                .then(|| push_site_pair(store, &mut sites, format!("enc{res}"), res, ch, rng));
            let down = Some(Conv2dLayer::new(
                store, &format!("base.down{l}.down"), ch, ch, 3, 2, 1, rng,
            ));
            downs.push(DownLevel { block, attn, down });
            ch_in = ch;
        }

        let mid_res = cfg.middle_resolution();
        let mid_ch = ch_in;
        let mid_block1 = ResBlock::new(store, &cfg, "base.mid.res1", mid_ch, mid_ch, rng);
        let mid_attn = cfg
            .attention_resolutions
            .contains(&mid_res)
            .then(|| push_site_pair(store, &mut sites, "mid".to_string(), mid_res, mid_ch, rng));
        let mid_block2 = ResBlock::new(store, &cfg, "base.mid.res2", mid_ch, mid_ch, rng);

        let mut ups = Vec::new();
        let mut ch_below = mid_ch;
        for l in (0..levels).rev() {
            let res = cfg.image_size >> l;
            let ch = cfg.base_channels * cfg.channel_multipliers[l];
            let upconv = Conv2dLayer::new(
                store, &format!("base.up{l}.upconv"), ch_below, ch, 3, 1, 1, rng,
            );
            let block = ResBlock::new(store, &cfg, &format!("base.up{l}.res"), 2 * ch, ch, rng);
            let attn = cfg
                .attention_resolutions
                .contains(&res)
                .then(|| push_site_pair(store, &mut sites, format!("dec{res}"), res, ch, rng));
            ups.push(UpLevel { upconv, block, attn });
            ch_below = ch;
        }

        let out_norm = GroupNormLayer::new(store, "base.out.norm", cfg.base_channels, cfg.norm_groups);
        let out_conv = Conv2dLayer::zeros(store, "base.out.conv", cfg.base_channels, cfg.in_channels, 3, 1, 1);
        Ok(UNet {
            config: cfg,
            time_fc1,
            time_fc2,
            stem,
            downs,
            mid_block1,
            mid_attn,
            mid_block2,
            ups,
            out_norm,
            out_conv,
            sites,
        })
    }

    /// Stable site ordering, as encountered during a forward pass.
    pub fn site_ids(&self) -> Vec<String> {
        self.sites.iter().map(|s| s.site_id.clone()).collect()
    }

    /// All base U-Net parameters (excludes text encoder and adapters).
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut p = Vec::new();
        p.extend(self.time_fc1.params());
        p.extend(self.time_fc2.params());
        p.extend(self.stem.params());
        for d in &self.downs {
            p.extend(d.block.params());
            if let Some(down) = &d.down {
                p.extend(down.params());
            }
        }
        p.extend(self.mid_block1.params());
        p.extend(self.mid_block2.params());
        for u in &self.ups {
            p.extend(u.upconv.params());
            p.extend(u.block.params());
        }
        p.extend(self.out_norm.params());
        p.extend(self.out_conv.params());
        for s in &self.sites {
            p.extend(s.params());
        }
        p
    }
}

// ---------------------------------------------------------------------------
// Branch adapters
// ---------------------------------------------------------------------------

/// Q/K/V/O adapter pairs for one attention site.
pub struct SiteAdapters {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
}

/// One branch's adapter set, aligned with `UNet::sites`.
pub struct BranchAdapters {
    pub branch: String,
    pub per_site: Vec<SiteAdapters>,
}

impl BranchAdapters {
    pub fn new<F: Scalar>(
        store: &mut ParamStore<F>,
        unet: &UNet,
        branch: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let cfg = &unet.config;
        let rank = cfg.lora_rank;
        let alpha = rank as f64;
        let per_site = unet
            .sites
            .iter()
            .map(|site| {
                let kv_dim = match site.kind {
                    SiteKind::SelfAttn => site.channels,
                    SiteKind::CrossAttn => cfg.context_dim,
                };
                let c = site.channels;
                let p = |proj: &str| format!("lora.{branch}.{}.{proj}", site.site_id);
                SiteAdapters {
                    q: LoraPair::new(store, &p("q"), c, c, rank, alpha, rng),
                    k: LoraPair::new(store, &p("k"), kv_dim, c, rank, alpha, rng),
                    v: LoraPair::new(store, &p("v"), kv_dim, c, rank, alpha, rng),
                    o: LoraPair::new(store, &p("o"), c, c, rank, alpha, rng),
                }
            })
            .collect();
        BranchAdapters { branch: branch.to_string(), per_site }
    }

    /// Flat view of every A and B matrix, in stable site order.
    pub fn lora_params(&self) -> Vec<ParamId> {
        let mut out = Vec::new();
        for sa in &self.per_site {
            for lp in [&sa.q, &sa.k, &sa.v, &sa.o] {
                out.push(lp.a);
                out.push(lp.b);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Forward pass
// ---------------------------------------------------------------------------

/// Per-item conditioning plan for one stream: which items of the batch see
/// the conditional context vs. the null context.
#[derive(Debug, Clone)]
pub struct ContextPlan {
    pub tokens: Vec<usize>,
    pub null_tokens: Vec<usize>,
    pub use_null: Vec<bool>,
}

impl ContextPlan {
    pub fn all_cond(tokens: Vec<usize>, null_tokens: Vec<usize>, batch: usize) -> Self {
        ContextPlan { tokens, null_tokens, use_null: vec![false; batch] }
    }

    pub fn all_null(tokens: Vec<usize>, null_tokens: Vec<usize>, batch: usize) -> Self {
        ContextPlan { tokens, null_tokens, use_null: vec![true; batch] }
    }
}

/// One latent stream pushed through the U-Net.
pub struct StreamInput<'a, F: Scalar> {
    pub z_t: ArrayD<F>,
    pub plan: ContextPlan,
    pub adapters: Option<&'a BranchAdapters>,
}

/// Callbacks around every attention site, fired in stream order. `kv_source`
/// is consulted only for self-attention sites.
pub trait StreamHook<F: Scalar> {
    fn kv_source(
        &mut self,
        _t: &mut Tape<F>,
        _store: &ParamStore<F>,
        _site_idx: usize,
        _stream: usize,
        x_norm: Id,
    ) -> Id {
        x_norm
    }

    /// One stream finished its attention block at this site (feature is the
    /// post-residual (B,C,H,W) output).
    fn stream_attended(
        &mut self,
        _t: &mut Tape<F>,
        _store: &ParamStore<F>,
        _site_idx: usize,
        _stream: usize,
        _feat: Id,
    ) {
    }

    /// All streams finished this site; features may be jointly rewritten.
    fn site_complete(
        &mut self,
        _t: &mut Tape<F>,
        _store: &ParamStore<F>,
        _site_idx: usize,
        _feats: &mut [Id],
    ) {
    }
}

/// Hook that does nothing: streams stay fully independent.
pub struct NoHook;
impl<F: Scalar> StreamHook<F> for NoHook {}

/// Tapped intermediates, keyed by (site id, stream index).
#[derive(Default)]
pub struct ForwardTaps {
    /// Post-attention-block features (B,C,H,W), before any joint rewrite.
    pub features: Vec<(String, usize, Id)>,
    /// Attention probabilities (B·heads, N, M) per site.
    pub attn_probs: Vec<(String, usize, Id)>,
    /// Projected queries (B,N,C) at self-attention sites.
    pub self_queries: Vec<(String, usize, Id)>,
    /// Post-hook key/value source tokens (B,N,C) at self-attention sites.
    pub self_kv_inputs: Vec<(String, usize, Id)>,
}

struct StreamState {
    h: Id,
    ctx: Id,
    skips: Vec<Id>,
}

pub fn forward_streams<F: Scalar, H: StreamHook<F>>(
    t: &mut Tape<F>,
    store: &ParamStore<F>,
    unet: &UNet,
    text: &TextEncoder,
    streams: &[StreamInput<'_, F>],
    ts: &[f64],
    hook: &mut H,
    mut taps: Option<&mut ForwardTaps>,
) -> Result<Vec<Id>> {
    let cfg = &unet.config;
    let batch = ts.len();
    for s in streams {
        let shape = s.z_t.shape();
        if shape != [batch, cfg.in_channels, cfg.image_size, cfg.image_size] {
            return Err(CoreError::Shape(format!(
                "stream latent shape {:?}, expected [{batch}, {}, {s2}, {s2}]",
                shape,
                cfg.in_channels,
                s2 = cfg.image_size
            )));
        }
        if s.plan.use_null.len() != batch {
            return Err(CoreError::Shape("context plan length != batch".into()));
        }
        if let Some(ad) = s.adapters {
            if ad.per_site.len() != unet.sites.len() {
                return Err(CoreError::Config(format!(
                    "adapter set for branch {:?} covers {} sites, model has {}",
                    ad.branch,
                    ad.per_site.len(),
                    unet.sites.len()
                )));
            }
        }
    }

    // Shared time embedding (same t vector for every stream).
    let emb = t.constant(sinusoidal_embedding(ts, cfg.time_embed_dim));
    let h1 = unet.time_fc1.forward(t, store, emb);
    let h1 = t.silu(h1);
    let temb = unet.time_fc2.forward(t, store, h1);

    // Per-stream context assembly: encode conditional and null sequences,
    // then pick per batch item.
    let mut states = Vec::with_capacity(streams.len());
    for s in streams {
        let cond = text.encode(t, store, &s.plan.tokens, cfg.vocab.len())?;
        let null = text.encode(t, store, &s.plan.null_tokens, cfg.vocab.len())?;
        let l = cfg.max_prompt_len;
        let d = cfg.context_dim;
        let cond3 = t.reshape(cond, &[1, l, d]);
        let null3 = t.reshape(null, &[1, l, d]);
        let parts: Vec<Id> = s
            .plan
            .use_null
            .iter()
            .map(|&n| if n { null3 } else { cond3 })
            .collect();
        let ctx = t.concat(0, &parts);
        let z = t.constant(s.z_t.clone());
        let h = unet.stem.forward(t, store, z);
        states.push(StreamState { h, ctx, skips: Vec::new() });
    }

    let run_site_pair = |t: &mut Tape<F>,
                             store: &ParamStore<F>,
                             states: &mut Vec<StreamState>,
                             self_idx: usize,
                             hook: &mut H,
                             taps: &mut Option<&mut ForwardTaps>|
     -> Result<()> {
        for idx in [self_idx, self_idx + 1] {
            let site = &unet.sites[idx];
            let mut feats: Vec<Id> = Vec::with_capacity(states.len());
            for (si, st) in states.iter().enumerate() {
                let lora = streams[si].adapters.map(|a| &a.per_site[idx]);
                let x = st.h;
                let shp = t.value(x).shape().to_vec();
                let (b, c, hh, ww) = (shp[0], shp[1], shp[2], shp[3]);
                let xn = site.norm.forward(t, store, x);
                let xr = t.reshape(xn, &[b, c, hh * ww]);
                let xs = t.permute(xr, &[0, 2, 1]);
                let kv_in = match site.kind {
                    SiteKind::SelfAttn => hook.kv_source(t, store, idx, si, xs),
                    SiteKind::CrossAttn => st.ctx,
                };
                let q = linear_adapted(t, store, &site.wq, lora.map(|l| &l.q), xs);
                let k = linear_adapted(t, store, &site.wk, lora.map(|l| &l.k), kv_in);
                let v = linear_adapted(t, store, &site.wv, lora.map(|l| &l.v), kv_in);
                if site.kind == SiteKind::SelfAttn {
                    if let Some(tp) = taps.as_deref_mut() {
                        tp.self_queries.push((site.site_id.clone(), si, q));
                        tp.self_kv_inputs.push((site.site_id.clone(), si, kv_in));
                    }
                }
                let att = multihead_attention(t, q, k, v, cfg.heads);
                if let Some(tp) = taps.as_deref_mut() {
                    tp.attn_probs.push((site.site_id.clone(), si, att.probs));
                }
                let o = linear_adapted(t, store, &site.wo, lora.map(|l| &l.o), att.ctx);
                let op = t.permute(o, &[0, 2, 1]);
                let o4 = t.reshape(op, &[b, c, hh, ww]);
                let out = t.add(x, o4);
                if let Some(tp) = taps.as_deref_mut() {
                    tp.features.push((site.site_id.clone(), si, out));
                }
                hook.stream_attended(t, store, idx, si, out);
                feats.push(out);
            }
            hook.site_complete(t, store, idx, &mut feats);
            for (st, &f) in states.iter_mut().zip(feats.iter()) {
                st.h = f;
            }
        }
        Ok(())
    };

    // Encoder.
    for level in &unet.downs {
        for st in states.iter_mut() {
            st.h = level.block.forward(t, store, st.h, temb);
        }
        if let Some(self_idx) = level.attn {
            run_site_pair(t, store, &mut states, self_idx, hook, &mut taps)?;
        }
        for st in states.iter_mut() {
            st.skips.push(st.h);
        }
        if let Some(down) = &level.down {
            for st in states.iter_mut() {
                st.h = down.forward(t, store, st.h);
            }
        }
    }

    // Middle.
    for st in states.iter_mut() {
        st.h = unet.mid_block1.forward(t, store, st.h, temb);
    }
    if let Some(self_idx) = unet.mid_attn {
        run_site_pair(t, store, &mut states, self_idx, hook, &mut taps)?;
    }
    for st in states.iter_mut() {
        st.h = unet.mid_block2.forward(t, store, st.h, temb);
    }

    // Decoder.
    for level in &unet.ups {
        for st in states.iter_mut() {
            let up = t.upsample2x(st.h);
            let conv = level.upconv.forward(t, store, up);
            let skip = st.skips.pop().expect("skip stack underflow");
            let cat = t.concat(1, &[conv, skip]);
            st.h = level.block.forward(t, store, cat, temb);
        }
        if let Some(self_idx) = level.attn {
            run_site_pair(t, store, &mut states, self_idx, hook, &mut taps)?;
        }
    }

    // Output head.
    let mut outs = Vec::with_capacity(states.len());
    for st in states.into_iter() {
        let h = unet.out_norm.forward(t, store, st.h);
        let h = t.silu(h);
        outs.push(unet.out_conv.forward(t, store, h));
    }
    Ok(outs)
}

/// Single-stream convenience wrapper (pretraining, probes).
#[allow(clippy::too_many_arguments)]
pub fn forward_single<F: Scalar>(
    t: &mut Tape<F>,
    store: &ParamStore<F>,
    unet: &UNet,
    text: &TextEncoder,
    z_t: ArrayD<F>,
    plan: ContextPlan,
    adapters: Option<&BranchAdapters>,
    ts: &[f64],
    taps: Option<&mut ForwardTaps>,
) -> Result<Id> {
    let stream = StreamInput { z_t, plan, adapters };
    let outs = forward_streams(t, store, unet, text, &[stream], ts, &mut NoHook, taps)?;
    Ok(outs[0])
}
