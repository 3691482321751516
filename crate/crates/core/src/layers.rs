//! Parameterized building blocks: linear and conv layers, group norm,
//! low-rank adapters, and multi-head attention. Each struct holds handles
//! into a [`ParamStore`]; forwards are recorded on a [`Tape`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;

use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Id, Tape};

/// Uniform init in ±1/√fan_in (the usual dense-layer default).
pub fn uniform_init<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> ArrayD<F> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut a = ArrayD::<F>::zeros(IxDyn(shape));
    for e in a.iter_mut() {
        *e = F::from_f64(rng.gen_range(-bound..bound));
    }
    a
}

pub fn normal_init<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<F> {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).unwrap();
    let mut a = ArrayD::<F>::zeros(IxDyn(shape));
    for e in a.iter_mut() {
        *e = F::from_f64(dist.sample(rng));
    }
    a
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.register(format!("{name}.w"), uniform_init(rng, &[d_out, d_in], d_in));
        let b = bias.then(|| store.register(format!("{name}.b"), uniform_init(rng, &[d_out], d_in)));
        Linear { w, b }
    }

    /// Weight (and bias) start at exactly zero.
    pub fn zeros<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let w = store.register(format!("{name}.w"), ArrayD::zeros(IxDyn(&[d_out, d_in])));
        let b = bias.then(|| store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[d_out]))));
        Linear { w, b }
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = vec![self.w];
        if let Some(b) = self.b {
            v.push(b);
        }
        v
    }

    /// Apply to a (..., d_in) node; returns (..., d_out).
    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Id) -> Id {
        let shape = t.value(x).shape().to_vec();
        let d_in = *shape.last().unwrap();
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let w = t.param(store, self.w);
        let d_out = t.value(w).shape()[0];
        let x2 = t.reshape(x, &[rows, d_in]);
        let mut y = t.matmul(x2, w, false, true);
        if let Some(bid) = self.b {
            let b = t.param(store, bid);
            y = t.add_bias_last(y, b);
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = d_out;
        t.reshape(y, &out_shape)
    }
}

/// Low-rank adapter for one projection: y += (α/r)·B·A·x with B zero-init,
/// so a fresh adapter is an exact no-op.
#[derive(Debug, Clone, Copy)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
}

impl LoraPair {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        d_in: usize,
        d_out: usize,
        rank: usize,
        alpha: f64,
        rng: &mut R,
    ) -> Self {
        let a = store.register(format!("{name}.A"), uniform_init(rng, &[rank, d_in], d_in));
        let b = store.register(format!("{name}.B"), ArrayD::zeros(IxDyn(&[d_out, rank])));
        LoraPair { a, b, rank, alpha }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Linear projection with an optional low-rank adapter added on top.
pub fn linear_adapted<F: Scalar>(
    t: &mut Tape<F>,
    store: &ParamStore<F>,
    lin: &Linear,
    lora: Option<&LoraPair>,
    x: Id,
) -> Id {
    let base = lin.forward(t, store, x);
    let Some(lp) = lora else { return base };
    let shape = t.value(x).shape().to_vec();
    let d_in = *shape.last().unwrap();
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let a = t.param(store, lp.a);
    let b = t.param(store, lp.b);
    let x2 = t.reshape(x, &[rows, d_in]);
    let down = t.matmul(x2, a, false, true);
    let up = t.matmul(down, b, false, true);
    let scaled = t.scale(up, lp.scale());
    let delta = t.reshape(scaled, t.value(base).shape().to_vec().as_slice());
    t.add(base, delta)
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2dLayer {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = c_in * k * k;
        let w = store.register(format!("{name}.w"), uniform_init(rng, &[c_out, c_in, k, k], fan_in));
        let b = store.register(format!("{name}.b"), uniform_init(rng, &[c_out], fan_in));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn zeros<F: Scalar>(
        store: &mut ParamStore<F>,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let w = store.register(format!("{name}.w"), ArrayD::zeros(IxDyn(&[c_out, c_in, k, k])));
        let b = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[c_out])));
        Conv2dLayer { w, b, stride, pad }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Id) -> Id {
        let w = t.param(store, self.w);
        let b = t.param(store, self.b);
        t.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GroupNormLayer {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
    pub eps: f64,
}

impl GroupNormLayer {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, name: &str, channels: usize, groups: usize) -> Self {
        let gamma = store.register(format!("{name}.g"), ArrayD::ones(IxDyn(&[channels])));
        let beta = store.register(format!("{name}.b"), ArrayD::zeros(IxDyn(&[channels])));
        GroupNormLayer { gamma, beta, groups, eps: 1e-5 }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn forward<F: Scalar>(&self, t: &mut Tape<F>, store: &ParamStore<F>, x: Id) -> Id {
        let g = t.param(store, self.gamma);
        let b = t.param(store, self.beta);
        t.group_norm(x, g, b, self.groups, self.eps)
    }
}

/// Scaled dot-product attention over already-projected q/k/v, all (B, N|M, C).
/// Returns the merged context (B, N, C) and the attention probabilities
/// (B·heads, N, M).
pub struct AttnOut {
    pub ctx: Id,
    pub probs: Id,
}

pub fn multihead_attention<F: Scalar>(
    t: &mut Tape<F>,
    q: Id,
    k: Id,
    v: Id,
    heads: usize,
) -> AttnOut {
    let (b, n, c) = {
        let s = t.value(q).shape();
        (s[0], s[1], s[2])
    };
    let m = t.value(k).shape()[1];
    assert_eq!(c % heads, 0, "channels {c} not divisible by heads {heads}");
    let d = c / heads;

    let split = |t: &mut Tape<F>, x: Id, len: usize| -> Id {
        let r = t.reshape(x, &[b, len, heads, d]);
        let p = t.permute(r, &[0, 2, 1, 3]);
        t.reshape(p, &[b * heads, len, d])
    };
    let qh = split(t, q, n);
    let kh = split(t, k, m);
    let vh = split(t, v, m);

    let scores = t.bmm(qh, kh, true);
    let scaled = t.scale(scores, 1.0 / (d as f64).sqrt());
    let probs = t.softmax_last(scaled);
    let ctxh = t.bmm(probs, vh, false);

    let r = t.reshape(ctxh, &[b, heads, n, d]);
    let p = t.permute(r, &[0, 2, 1, 3]);
    let ctx = t.reshape(p, &[b, n, c]);
    AttnOut { ctx, probs }
}

/// Sinusoidal timestep embedding (B, dim): first half cosines, second half
/// sines, with geometrically spaced frequencies.
pub fn sinusoidal_embedding<F: Scalar>(ts: &[f64], dim: usize) -> ArrayD<F> {
    assert!(dim % 2 == 0, "embedding dim must be even");
    let half = dim / 2;
    let mut out = ArrayD::<F>::zeros(IxDyn(&[ts.len(), dim]));
    for (bi, &tv) in ts.iter().enumerate() {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            let arg = tv * freq;
            out[[bi, i]] = F::from_f64(arg.cos());
            out[[bi, half + i]] = F::from_f64(arg.sin());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_matches_manual_affine() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let x = ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, 2.0, 3.0, -1.0, 0.0, 0.5]).unwrap();
        let mut t = Tape::new();
        let xi = t.constant(x.clone());
        let y = lin.forward(&mut t, &store, xi);
        let w = store.value(lin.w);
        let b = store.value(lin.b.unwrap());
        for r in 0..2 {
            for o in 0..2 {
                let mut acc = b[[o]];
                for i in 0..3 {
                    acc += x[[r, i]] * w[[o, i]];
                }
                assert!((t.value(y)[[r, o]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fresh_adapter_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "l", 8, 8, true, &mut rng);
        let lora = LoraPair::new(&mut store, "l.lora", 8, 8, 4, 4.0, &mut rng);
        let x = uniform_init::<f32, _>(&mut rng, &[5, 8], 1);
        let mut t = Tape::new();
        let xi = t.constant(x);
        let base = lin.forward(&mut t, &store, xi);
        let adapted = linear_adapted(&mut t, &store, &lin, Some(&lora), xi);
        // B starts at zero, so the adapted output must be bitwise equal.
        let bb: Vec<u32> = t.value(base).iter().map(|v| v.to_bits()).collect();
        let ab: Vec<u32> = t.value(adapted).iter().map(|v| v.to_bits()).collect();
        assert_eq!(bb, ab);
    }

    #[test]
    fn sinusoidal_embedding_range_and_distinctness() {
        let e = sinusoidal_embedding::<f64>(&[0.0, 1.0, 500.0], 16);
        assert_eq!(e.shape(), &[3, 16]);
        // t=0 -> all cosines 1, all sines 0.
        for i in 0..8 {
            assert!((e[[0, i]] - 1.0).abs() < 1e-12);
            assert!(e[[0, 8 + i]].abs() < 1e-12);
        }
        let row1: Vec<f64> = (0..16).map(|i| e[[1, i]]).collect();
        let row2: Vec<f64> = (0..16).map(|i| e[[2, i]]).collect();
        assert!(row1 != row2);
    }
}
