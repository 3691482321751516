//! Contracts of the denoiser: stable attention-site enumeration, tokenizer
//! behaviour, adapter no-op at init, multi-stream walker equivalence, and
//! input validation.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use twindiff_core::denoiser::{
    forward_single, forward_streams, tokenize, BranchAdapters, ContextPlan, DenoiserConfig,
    ForwardTaps, NoHook, PromptPair, StreamInput, TextEncoder, UNet,
};
use twindiff_core::error::CoreError;
use twindiff_core::params::ParamStore;
use twindiff_core::tape::Tape;

fn rand_latent(rng: &mut ChaCha8Rng, b: usize, c: usize, s: usize) -> ArrayD<f32> {
    let mut a = ArrayD::<f32>::zeros(IxDyn(&[b, c, s, s]));
    for e in a.iter_mut() {
        *e = rng.gen_range(-1.0..1.0);
    }
    a
}

struct TinyModel {
    store: ParamStore<f32>,
    unet: UNet,
    text: TextEncoder,
}

fn tiny_model(seed: u64) -> TinyModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<f32>::new();
    let cfg = DenoiserConfig::tiny_test();
    let unet = UNet::new(&mut store, cfg.clone(), &mut rng).unwrap();
    let text = TextEncoder::new(&mut store, &cfg, &mut rng);
    TinyModel { store, unet, text }
}

#[test]
fn desk_config_enumerates_six_sites_in_stable_order() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::<f32>::new();
    let cfg = DenoiserConfig::desk_default();
    assert_eq!(cfg.middle_resolution(), 8);
    let unet = UNet::new(&mut store, cfg, &mut rng).unwrap();
    assert_eq!(
        unet.site_ids(),
        vec!["enc16_self", "enc16_cross", "mid_self", "mid_cross", "dec16_self", "dec16_cross"]
    );
    // Every attention site of the desk model runs at 128 channels.
    for s in &unet.sites {
        assert_eq!(s.channels, 128);
    }
}

#[test]
fn tiny_config_enumerates_six_sites_too() {
    let m = tiny_model(1);
    assert_eq!(
        m.unet.site_ids(),
        vec!["enc4_self", "enc4_cross", "mid_self", "mid_cross", "dec4_self", "dec4_cross"]
    );
    assert_eq!(m.unet.config.middle_resolution(), 2);
}

#[test]
fn tokenizer_pads_with_nulls_and_rejects_unknown_words() {
    let cfg = DenoiserConfig::desk_default();
    assert_eq!(tokenize(&cfg, "a vfx with sks").unwrap(), vec![1, 2, 3, 4, 0, 0, 0, 0]);
    assert_eq!(tokenize(&cfg, "sks").unwrap(), vec![4, 0, 0, 0, 0, 0, 0, 0]);
    assert_eq!(tokenize(&cfg, "").unwrap(), vec![0; 8]);
    let err = tokenize(&cfg, "a zebra").unwrap_err();
    match err {
        CoreError::Config(msg) => assert!(msg.contains("zebra"), "message should name the word: {msg}"),
        other => panic!("expected config error, got {other:?}"),
    }
}

#[test]
fn prompt_pair_enforces_nesting() {
    let cfg = DenoiserConfig::desk_default();
    let pair = PromptPair::desk_default(&cfg).unwrap();
    assert_eq!(pair.p_tokens[..4], [1, 2, 3, 4]);
    assert_eq!(pair.p_prime_tokens[0], 4);
    assert_eq!(pair.null_tokens, vec![0; 8]);
    // "a vfx" does not contain "sks": the nested-prompt rule must reject it.
    assert!(matches!(
        PromptPair::new(&cfg, "a vfx", "sks"),
        Err(CoreError::Config(_))
    ));
}

#[test]
fn fresh_adapters_leave_the_forward_pass_bitwise_unchanged() {
    let mut m = tiny_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let adapters = BranchAdapters::new(&mut m.store, &m.unet, "g", &mut rng);
    let cfg = &m.unet.config;
    let pair = PromptPair::desk_default(cfg).unwrap();
    let z = rand_latent(&mut rng, 2, 3, cfg.image_size);
    let ts = [17.0, 530.0];

    let plan = ContextPlan::all_cond(pair.p_tokens.clone(), pair.null_tokens.clone(), 2);
    let mut t1 = Tape::new();
    let base = forward_single(&mut t1, &m.store, &m.unet, &m.text, z.clone(), plan.clone(), None, &ts, None)
        .unwrap();
    let mut t2 = Tape::new();
    let adapted =
        forward_single(&mut t2, &m.store, &m.unet, &m.text, z, plan, Some(&adapters), &ts, None)
            .unwrap();

    let bb: Vec<u32> = t1.value(base).iter().map(|v| v.to_bits()).collect();
    let ab: Vec<u32> = t2.value(adapted).iter().map(|v| v.to_bits()).collect();
    assert_eq!(bb, ab, "zero-init adapters must be an exact no-op");
}

#[test]
fn walker_with_two_streams_matches_two_single_forwards() {
    let mut m = tiny_model(4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = BranchAdapters::new(&mut m.store, &m.unet, "g", &mut rng);
    let a = BranchAdapters::new(&mut m.store, &m.unet, "a", &mut rng);
    // Give the adapters real (nonzero) weight so the branches differ.
    for ad in [&g, &a] {
        for id in ad.lora_params() {
            let arr = m.store.value(id).mapv(|_| rng.gen_range(-0.3f32..0.3));
            m.store.value_mut(id).assign(&arr);
        }
    }
    let cfg = m.unet.config.clone();
    let pair = PromptPair::desk_default(&cfg).unwrap();
    let zg = rand_latent(&mut rng, 2, 3, cfg.image_size);
    let za = rand_latent(&mut rng, 2, 3, cfg.image_size);
    let ts = [100.0, 900.0];
    let plan_g = ContextPlan::all_cond(pair.p_tokens.clone(), pair.null_tokens.clone(), 2);
    let plan_a = ContextPlan::all_cond(pair.p_prime_tokens.clone(), pair.null_tokens.clone(), 2);

    let mut tj = Tape::new();
    let joint = forward_streams(
        &mut tj,
        &m.store,
        &m.unet,
        &m.text,
        &[
            StreamInput { z_t: zg.clone(), plan: plan_g.clone(), adapters: Some(&g) },
            StreamInput { z_t: za.clone(), plan: plan_a.clone(), adapters: Some(&a) },
        ],
        &ts,
        &mut NoHook,
        None,
    )
    .unwrap();

    let mut t1 = Tape::new();
    let solo_g =
        forward_single(&mut t1, &m.store, &m.unet, &m.text, zg, plan_g, Some(&g), &ts, None).unwrap();
    let mut t2 = Tape::new();
    let solo_a =
        forward_single(&mut t2, &m.store, &m.unet, &m.text, za, plan_a, Some(&a), &ts, None).unwrap();

    let jb: Vec<u32> = tj.value(joint[0]).iter().map(|v| v.to_bits()).collect();
    let sb: Vec<u32> = t1.value(solo_g).iter().map(|v| v.to_bits()).collect();
    assert_eq!(jb, sb, "global stream must not be affected by the anomaly stream");
    let ja: Vec<u32> = tj.value(joint[1]).iter().map(|v| v.to_bits()).collect();
    let sa: Vec<u32> = t2.value(solo_a).iter().map(|v| v.to_bits()).collect();
    assert_eq!(ja, sa, "anomaly stream must not be affected by the global stream");
}

#[test]
fn identical_batch_rows_produce_identical_outputs() {
    let m = tiny_model(6);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let cfg = &m.unet.config;
    let one = rand_latent(&mut rng, 1, 3, cfg.image_size);
    let mut two = ArrayD::<f32>::zeros(IxDyn(&[2, 3, cfg.image_size, cfg.image_size]));
    for b in 0..2 {
        for c in 0..3 {
            for y in 0..cfg.image_size {
                for x in 0..cfg.image_size {
                    two[[b, c, y, x]] = one[[0, c, y, x]];
                }
            }
        }
    }
    let pair = PromptPair::desk_default(cfg).unwrap();
    let plan = ContextPlan::all_cond(pair.p_tokens.clone(), pair.null_tokens.clone(), 2);
    let mut t = Tape::new();
    let out = forward_single(&mut t, &m.store, &m.unet, &m.text, two, plan, None, &[42.0, 42.0], None)
        .unwrap();
    let v = t.value(out);
    for c in 0..3 {
        for y in 0..cfg.image_size {
            for x in 0..cfg.image_size {
                assert_eq!(
                    v[[0, c, y, x]].to_bits(),
                    v[[1, c, y, x]].to_bits(),
                    "rows must be processed independently"
                );
            }
        }
    }
}

#[test]
fn per_item_null_context_matches_mixed_assembly() {
    // Item 0 conditional, item 1 null must equal running each separately.
    let m = tiny_model(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let cfg = &m.unet.config;
    let pair = PromptPair::desk_default(cfg).unwrap();
    let z = rand_latent(&mut rng, 2, 3, cfg.image_size);
    let z0 = z.slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..1)).to_owned().into_dyn();
    let z1 = z.slice_axis(ndarray::Axis(0), ndarray::Slice::from(1..2)).to_owned().into_dyn();

    let mixed_plan = ContextPlan {
        tokens: pair.p_tokens.clone(),
        null_tokens: pair.null_tokens.clone(),
        use_null: vec![false, true],
    };
    let mut tm = Tape::new();
    let mixed =
        forward_single(&mut tm, &m.store, &m.unet, &m.text, z, mixed_plan, None, &[5.0, 5.0], None)
            .unwrap();

    let mut tc = Tape::new();
    let cond_plan = ContextPlan::all_cond(pair.p_tokens.clone(), pair.null_tokens.clone(), 1);
    let cond =
        forward_single(&mut tc, &m.store, &m.unet, &m.text, z0, cond_plan, None, &[5.0], None).unwrap();
    let mut tn = Tape::new();
    let null_plan = ContextPlan::all_null(pair.p_tokens.clone(), pair.null_tokens.clone(), 1);
    let null =
        forward_single(&mut tn, &m.store, &m.unet, &m.text, z1, null_plan, None, &[5.0], None).unwrap();

    let mv = tm.value(mixed);
    let cv = tc.value(cond);
    let nv = tn.value(null);
    let s = cfg.image_size;
    for c in 0..3 {
        for y in 0..s {
            for x in 0..s {
                assert_eq!(mv[[0, c, y, x]].to_bits(), cv[[0, c, y, x]].to_bits());
                assert_eq!(mv[[1, c, y, x]].to_bits(), nv[[0, c, y, x]].to_bits());
            }
        }
    }
}

#[test]
fn taps_cover_every_site_and_probabilities_are_row_stochastic() {
    let m = tiny_model(10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = &m.unet.config;
    let pair = PromptPair::desk_default(cfg).unwrap();
    let z = rand_latent(&mut rng, 2, 3, cfg.image_size);
    let plan = ContextPlan::all_cond(pair.p_tokens.clone(), pair.null_tokens.clone(), 2);
    let mut taps = ForwardTaps::default();
    let mut t = Tape::new();
    forward_single(&mut t, &m.store, &m.unet, &m.text, z, plan, None, &[3.0, 7.0], Some(&mut taps))
        .unwrap();
    let ids: Vec<&str> = taps.features.iter().map(|(s, _, _)| s.as_str()).collect();
    assert_eq!(ids, m.unet.site_ids().iter().map(|s| s.as_str()).collect::<Vec<_>>());
    assert_eq!(taps.attn_probs.len(), 6);
    for (site_id, _, pid) in &taps.attn_probs {
        let probs = t.value(*pid);
        let shape = probs.shape().to_vec();
        if site_id.ends_with("_cross") {
            assert_eq!(shape[2], cfg.max_prompt_len, "cross keys come from the prompt");
        } else {
            assert_eq!(shape[1], shape[2], "self keys come from the feature map");
        }
        let m_len = shape[2];
        for row in probs.view().into_shape_with_order((shape[0] * shape[1], m_len)).unwrap().rows()
        {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-5, "row sum {s}");
        }
    }
}

#[test]
fn trainable_parameter_counts_are_as_designed() {
    let mut m = tiny_model(12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = BranchAdapters::new(&mut m.store, &m.unet, "g", &mut rng);
    let a = BranchAdapters::new(&mut m.store, &m.unet, "a", &mut rng);
    let count = |ids: &[twindiff_core::params::ParamId]| -> usize {
        ids.iter().map(|&id| m.store.value(id).len()).sum()
    };
    // 6 sites x 4 projections x (A: 1x4 + B: 4x1) = 192 per branch.
    assert_eq!(count(&g.lora_params()), 192);
    assert_eq!(count(&a.lora_params()), 192);
    // Embedding 5x4 + positions 8x4 + four (4x4 + 4) projections = 132.
    assert_eq!(count(&m.text.params()), 132);
}

#[test]
fn adapter_names_follow_the_checkpoint_scheme() {
    let mut m = tiny_model(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = BranchAdapters::new(&mut m.store, &m.unet, "g", &mut rng);
    let first = g.per_site[0].q;
    assert_eq!(m.store.name(first.a), "lora.g.enc4_self.q.A");
    assert_eq!(m.store.name(first.b), "lora.g.enc4_self.q.B");
    let last = g.per_site[5].o;
    assert_eq!(m.store.name(last.a), "lora.g.dec4_cross.o.A");
    assert!(m.store.lookup("base.mid_self.q.w").is_some());
    assert!(m.store.lookup("text.embed").is_some());
}

#[test]
fn wrong_latent_shape_is_rejected() {
    let m = tiny_model(16);
    let cfg = &m.unet.config;
    let pair = PromptPair::desk_default(cfg).unwrap();
    let bad = ArrayD::<f32>::zeros(IxDyn(&[2, 3, 4, 4]));
    let plan = ContextPlan::all_cond(pair.p_tokens.clone(), pair.null_tokens.clone(), 2);
    let mut t = Tape::new();
    let err = forward_single(&mut t, &m.store, &m.unet, &m.text, bad, plan, None, &[1.0, 2.0], None)
        .unwrap_err();
    assert!(matches!(err, CoreError::Shape(_)));
}

#[test]
fn invalid_configs_are_rejected() {
    let mut bad = DenoiserConfig::desk_default();
    bad.lora_rank = 0;
    assert!(bad.validate().is_err());
    let mut bad = DenoiserConfig::desk_default();
    bad.attention_resolutions = vec![7];
    assert!(bad.validate().is_err());
    let mut bad = DenoiserConfig::desk_default();
    bad.heads = 5; // 128 channels not divisible by 5 heads
    assert!(bad.validate().is_err());
    let mut bad = DenoiserConfig::desk_default();
    bad.vocab = vec!["a".into()];
    assert!(bad.validate().is_err());
    assert!(DenoiserConfig::desk_default().validate().is_ok());
    assert!(DenoiserConfig::tiny_test().validate().is_ok());
}
