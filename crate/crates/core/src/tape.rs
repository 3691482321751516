//! Reverse-mode autodiff on a Wengert tape.
//!
//! Every tensor op records a node holding its (C-contiguous) result plus the
//! bookkeeping needed for the backward sweep. One tape is built per training
//! step or per sampling forward and dropped afterwards. The same code runs in
//! f32 for training and f64 for the finite-difference oracles.

use ndarray::{ArrayD, ArrayViewD, IxDyn};

use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};

/// Index of a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Id(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Id, Id),
    Sub(Id, Id),
    Mul(Id, Id),
    Sqr(Id),
    Scale(Id, f64),
    /// 2-D matmul with optional transposes: out = a' @ b'.
    MatMul { a: Id, b: Id, ta: bool, tb: bool },
    /// Batched matmul: (B,m,k) @ (B,k,n), optional transpose of b's last two axes.
    Bmm { a: Id, b: Id, tb: bool },
    Conv2d { x: Id, w: Id, bias: Option<Id>, stride: usize, pad: usize },
    GroupNorm { x: Id, gamma: Id, beta: Id, groups: usize, eps: f64 },
    Silu(Id),
    SoftmaxLast(Id),
    Reshape(Id),
    Permute { x: Id, axes: Vec<usize> },
    Concat { parts: Vec<Id>, axis: usize },
    Slice { x: Id, axis: usize, start: usize, len: usize },
    Upsample2x(Id),
    Embed { table: Id, ids: Vec<usize> },
    /// (B,C,H,W) + per-(B,C) vector, broadcast over H,W.
    AddChanVec { x: Id, v: Id },
    /// (..., d) + (d,), broadcast over leading axes.
    AddBiasLast { x: Id, b: Id },
    /// x * s where s is a single-element tensor (learnable scalar).
    ScaleBy { x: Id, s: Id },
    MeanAll(Id),
    /// Mean binary cross-entropy of logits `x` against targets `z` in [0,1].
    BceWithLogits { x: Id, z: Id },
}

impl Op {
    fn for_each_input(&self, mut f: impl FnMut(Id)) {
        match self {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Sqr(a)
            | Op::Scale(a, _)
            | Op::Silu(a)
            | Op::SoftmaxLast(a)
            | Op::Reshape(a)
            | Op::Upsample2x(a)
            | Op::MeanAll(a) => f(*a),
            Op::MatMul { a, b, .. } | Op::Bmm { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::Conv2d { x, w, bias, .. } => {
                f(*x);
                f(*w);
                if let Some(b) = bias {
                    f(*b);
                }
            }
            Op::GroupNorm { x, gamma, beta, .. } => {
                f(*x);
                f(*gamma);
                f(*beta);
            }
            Op::Permute { x, .. } | Op::Slice { x, .. } => f(*x),
            Op::Concat { parts, .. } => {
                for p in parts {
                    f(*p);
                }
            }
            Op::Embed { table, .. } => f(*table),
            Op::AddChanVec { x, v } => {
                f(*x);
                f(*v);
            }
            Op::AddBiasLast { x, b } => {
                f(*x);
                f(*b);
            }
            Op::ScaleBy { x, s } => {
                f(*x);
                f(*s);
            }
            Op::BceWithLogits { x, z } => {
                f(*x);
                f(*z);
            }
        }
    }
}

struct Node<F: Scalar> {
    value: ArrayD<F>,
    op: Op,
}

/// Gradient-carrying computation tape.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: Id) -> &ArrayD<F> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: ArrayD<F>, op: Op) -> Id {
        debug_assert!(value.is_standard_layout());
        self.nodes.push(Node { value, op });
        Id(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: ArrayD<F>) -> Id {
        let value = to_standard(value);
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter; backward accumulates into the store.
    pub fn param(&mut self, store: &ParamStore<F>, pid: ParamId) -> Id {
        self.push(store.value(pid).clone(), Op::Param(pid))
    }

    pub fn add(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Id, b: Id) -> Id {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn sqr(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x * x);
        self.push(v, Op::Sqr(a))
    }

    pub fn scale(&mut self, a: Id, c: f64) -> Id {
        let cf = F::from_f64(c);
        let v = self.nodes[a.0].value.mapv(|x| x * cf);
        self.push(v, Op::Scale(a, c))
    }

    pub fn matmul(&mut self, a: Id, b: Id, ta: bool, tb: bool) -> Id {
        let v = gemm_2d(&self.nodes[a.0].value, &self.nodes[b.0].value, ta, tb);
        self.push(v, Op::MatMul { a, b, ta, tb })
    }

    pub fn bmm(&mut self, a: Id, b: Id, tb: bool) -> Id {
        let v = bmm_3d(&self.nodes[a.0].value, &self.nodes[b.0].value, false, tb);
        self.push(v, Op::Bmm { a, b, tb })
    }

    pub fn conv2d(&mut self, x: Id, w: Id, bias: Option<Id>, stride: usize, pad: usize) -> Id {
        let v = conv2d_forward(
            &self.nodes[x.0].value,
            &self.nodes[w.0].value,
            bias.map(|b| &self.nodes[b.0].value),
            stride,
            pad,
        );
        self.push(v, Op::Conv2d { x, w, bias, stride, pad })
    }

    pub fn group_norm(&mut self, x: Id, gamma: Id, beta: Id, groups: usize, eps: f64) -> Id {
        let v = group_norm_forward(
            &self.nodes[x.0].value,
            &self.nodes[gamma.0].value,
            &self.nodes[beta.0].value,
            groups,
            eps,
        );
        self.push(v, Op::GroupNorm { x, gamma, beta, groups, eps })
    }

    pub fn silu(&mut self, a: Id) -> Id {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn softmax_last(&mut self, a: Id) -> Id {
        let v = softmax_last_forward(&self.nodes[a.0].value);
        self.push(v, Op::SoftmaxLast(a))
    }

    pub fn reshape(&mut self, a: Id, shape: &[usize]) -> Id {
        let v = self.nodes[a.0]
            .value
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(v, Op::Reshape(a))
    }

    pub fn permute(&mut self, a: Id, axes: &[usize]) -> Id {
        let v = to_standard(self.nodes[a.0].value.view().permuted_axes(IxDyn(axes)).to_owned());
        self.push(v, Op::Permute { x: a, axes: axes.to_vec() })
    }

    pub fn concat(&mut self, axis: usize, parts: &[Id]) -> Id {
        let views: Vec<ArrayViewD<F>> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(ndarray::Axis(axis), &views).expect("concat: shape mismatch");
        self.push(to_standard(v), Op::Concat { parts: parts.to_vec(), axis })
    }

    pub fn slice(&mut self, a: Id, axis: usize, start: usize, len: usize) -> Id {
        let v = self.nodes[a.0]
            .value
            .slice_axis(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
            .to_owned();
        self.push(to_standard(v), Op::Slice { x: a, axis, start, len })
    }

    pub fn upsample2x(&mut self, a: Id) -> Id {
        let v = upsample2x_forward(&self.nodes[a.0].value);
        self.push(v, Op::Upsample2x(a))
    }

    pub fn embed(&mut self, table: Id, ids: &[usize]) -> Id {
        let t = &self.nodes[table.0].value;
        let d = t.shape()[1];
        let mut out = ArrayD::<F>::zeros(IxDyn(&[ids.len(), d]));
        {
            let ts = t.as_slice().unwrap();
            let os = out.as_slice_mut().unwrap();
            for (row, &id) in ids.iter().enumerate() {
                os[row * d..(row + 1) * d].copy_from_slice(&ts[id * d..(id + 1) * d]);
            }
        }
        self.push(out, Op::Embed { table, ids: ids.to_vec() })
    }

    pub fn add_chan_vec(&mut self, x: Id, v: Id) -> Id {
        let xv = &self.nodes[x.0].value;
        let vv = &self.nodes[v.0].value;
        let (b, c, h, w) = dims4(xv);
        assert_eq!(vv.shape(), &[b, c], "add_chan_vec: vector shape mismatch");
        let mut out = xv.clone();
        {
            let os = out.as_slice_mut().unwrap();
            let vs = vv.as_slice().unwrap();
            let hw = h * w;
            for bi in 0..b {
                for ci in 0..c {
                    let add = vs[bi * c + ci];
                    let base = (bi * c + ci) * hw;
                    for e in &mut os[base..base + hw] {
                        *e = *e + add;
                    }
                }
            }
        }
        self.push(out, Op::AddChanVec { x, v })
    }

    pub fn add_bias_last(&mut self, x: Id, bias: Id) -> Id {
        let xv = &self.nodes[x.0].value;
        let bv = &self.nodes[bias.0].value;
        let d = *xv.shape().last().unwrap();
        assert_eq!(bv.shape(), &[d], "add_bias_last: bias shape mismatch");
        let mut out = xv.clone();
        {
            let os = out.as_slice_mut().unwrap();
            let bs = bv.as_slice().unwrap();
            for chunk in os.chunks_exact_mut(d) {
                for (e, &bb) in chunk.iter_mut().zip(bs) {
                    *e = *e + bb;
                }
            }
        }
        self.push(out, Op::AddBiasLast { x, b: bias })
    }

    pub fn scale_by(&mut self, x: Id, s: Id) -> Id {
        let sval = self.nodes[s.0].value.as_slice().unwrap()[0];
        let v = self.nodes[x.0].value.mapv(|e| e * sval);
        self.push(v, Op::ScaleBy { x, s })
    }

    pub fn mean_all(&mut self, a: Id) -> Id {
        let av = &self.nodes[a.0].value;
        let n = F::from_f64(av.len() as f64);
        let sum: F = av.iter().copied().sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), sum / n);
        self.push(v, Op::MeanAll(a))
    }

    /// Mean squared error between two same-shape nodes, as a 1-element node.
    pub fn mse(&mut self, a: Id, b: Id) -> Id {
        let d = self.sub(a, b);
        let s = self.sqr(d);
        self.mean_all(s)
    }

    /// Mean binary cross-entropy between logits `x` and targets `z` in [0,1],
    /// in the overflow-safe form max(x,0) − x·z + ln(1+e^{−|x|}).
    pub fn bce_with_logits(&mut self, x: Id, z: Id) -> Id {
        let xv = &self.nodes[x.0].value;
        let zv = &self.nodes[z.0].value;
        assert_eq!(xv.shape(), zv.shape(), "bce_with_logits: shape mismatch");
        let n = F::from_f64(xv.len() as f64);
        let sum: F = xv
            .iter()
            .zip(zv.iter())
            .map(|(&xe, &ze)| {
                let pos = if xe > F::zero() { xe } else { F::zero() };
                pos - xe * ze + (F::one() + (-xe.abs()).exp()).ln()
            })
            .sum();
        let v = ArrayD::from_elem(IxDyn(&[1]), sum / n);
        self.push(v, Op::BceWithLogits { x, z })
    }

    /// Reverse sweep from `root` (must be a 1-element node). Parameter
    /// gradients are accumulated into `store`; the full per-node gradient
    /// vector is returned for tests that inspect intermediate gradients.
    pub fn backward(&mut self, root: Id, store: &mut ParamStore<F>) -> Vec<Option<ArrayD<F>>> {
        self.backward_filtered(root, store, None)
    }

    /// Like [`Tape::backward`], but when `trainable` is given, gradient work
    /// is pruned to the subgraph that can reach a trainable parameter: frozen
    /// parameters get no gradient, and nodes feeding only frozen parameters
    /// are skipped entirely.
    pub fn backward_filtered(
        &mut self,
        root: Id,
        store: &mut ParamStore<F>,
        trainable: Option<&std::collections::HashSet<ParamId>>,
    ) -> Vec<Option<ArrayD<F>>> {
        // Forward pass over node order: does this node's gradient matter?
        let mut needs = vec![false; self.nodes.len()];
        for i in 0..self.nodes.len() {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf => false,
                Op::Param(pid) => trainable.map_or(true, |set| set.contains(pid)),
                op => {
                    let mut any = false;
                    op.for_each_input(|id| any |= needs[id.0]);
                    any
                }
            };
        }

        let mut grads: Vec<Option<ArrayD<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward root must be scalar");
        grads[root.0] = Some(ArrayD::from_elem(self.nodes[root.0].value.raw_dim(), F::one()));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            match self.nodes[i].op.clone() {
                Op::Leaf => {}
                Op::Param(pid) => {
                    if trainable.map_or(true, |set| set.contains(&pid)) {
                        store.accumulate_grad(pid, &g);
                    }
                }
                Op::Add(a, b) => match (needs[a.0], needs[b.0]) {
                    (true, true) => {
                        accum(&mut grads, a, g.clone());
                        accum(&mut grads, b, g);
                    }
                    (true, false) => accum(&mut grads, a, g),
                    (false, true) => accum(&mut grads, b, g),
                    (false, false) => {}
                },
                Op::Sub(a, b) => {
                    if needs[b.0] {
                        accum(&mut grads, b, g.mapv(|x| -x));
                    }
                    if needs[a.0] {
                        accum(&mut grads, a, g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs[a.0] {
                        let ga = &g * &self.nodes[b.0].value;
                        accum(&mut grads, a, ga);
                    }
                    if needs[b.0] {
                        let gb = &g * &self.nodes[a.0].value;
                        accum(&mut grads, b, gb);
                    }
                }
                Op::Sqr(a) => {
                    if needs[a.0] {
                        let two = F::from_f64(2.0);
                        let ga = &g * &self.nodes[a.0].value.mapv(|x| x * two);
                        accum(&mut grads, a, ga);
                    }
                }
                Op::Scale(a, c) => {
                    if needs[a.0] {
                        let cf = F::from_f64(c);
                        accum(&mut grads, a, g.mapv(|x| x * cf));
                    }
                }
                Op::MatMul { a, b, ta, tb } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    // d a' = g @ b'^T ; d b' = a'^T @ g, then undo transposes.
                    if needs[a.0] {
                        let ga = if ta {
                            gemm_2d(bv, &g, tb, true)
                        } else {
                            gemm_2d(&g, bv, false, !tb)
                        };
                        accum(&mut grads, a, ga);
                    }
                    if needs[b.0] {
                        let gb = if tb {
                            gemm_2d(&g, av, true, ta)
                        } else {
                            gemm_2d(av, &g, !ta, false)
                        };
                        accum(&mut grads, b, gb);
                    }
                }
                Op::Bmm { a, b, tb } => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    if needs[a.0] {
                        let ga = bmm_3d(&g, bv, false, !tb);
                        accum(&mut grads, a, ga);
                    }
                    if needs[b.0] {
                        let gb = if tb {
                            bmm_3d(&g, av, true, false)
                        } else {
                            bmm_3d(av, &g, true, false)
                        };
                        accum(&mut grads, b, gb);
                    }
                }
                Op::Conv2d { x, w, bias, stride, pad } => {
                    let need_b = bias.map(|bid| needs[bid.0]).unwrap_or(false);
                    let (gx, gw, gb) = conv2d_backward(
                        &g,
                        &self.nodes[x.0].value,
                        &self.nodes[w.0].value,
                        stride,
                        pad,
                        needs[x.0],
                        needs[w.0],
                        need_b,
                    );
                    if let Some(gx) = gx {
                        accum(&mut grads, x, gx);
                    }
                    if let Some(gw) = gw {
                        accum(&mut grads, w, gw);
                    }
                    if let (Some(bid), Some(gb)) = (bias, gb) {
                        accum(&mut grads, bid, gb);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, eps } => {
                    let (gx, gg, gb) = group_norm_backward(
                        &g,
                        &self.nodes[x.0].value,
                        &self.nodes[gamma.0].value,
                        groups,
                        eps,
                    );
                    if needs[x.0] {
                        accum(&mut grads, x, gx);
                    }
                    if needs[gamma.0] {
                        accum(&mut grads, gamma, gg);
                    }
                    if needs[beta.0] {
                        accum(&mut grads, beta, gb);
                    }
                }
                Op::Silu(a) => {
                    if !needs[a.0] {
                        continue;
                    }
                    let ga = ndarray::Zip::from(&g)
                        .and(&self.nodes[a.0].value)
                        .map_collect(|&go, &x| {
                            let s = sigmoid(x);
                            go * s * (F::one() + x * (F::one() - s))
                        });
                    accum(&mut grads, a, ga);
                }
                Op::SoftmaxLast(a) => {
                    if !needs[a.0] {
                        continue;
                    }
                    let y = &self.nodes[i].value;
                    let d = *y.shape().last().unwrap();
                    let mut ga = &g * y;
                    {
                        let gs = ga.as_slice_mut().unwrap();
                        let ys = y.as_slice().unwrap();
                        for (grow, yrow) in gs.chunks_exact_mut(d).zip(ys.chunks_exact(d)) {
                            let dot: F = grow.iter().copied().sum();
                            for (ge, &ye) in grow.iter_mut().zip(yrow) {
                                *ge = *ge - dot * ye;
                            }
                        }
                    }
                    accum(&mut grads, a, ga);
                }
                Op::Reshape(a) => {
                    if !needs[a.0] {
                        continue;
                    }
                    let shape = self.nodes[a.0].value.raw_dim();
                    accum(&mut grads, a, g.into_shape_with_order(shape).unwrap());
                }
                Op::Permute { x, axes } => {
                    if !needs[x.0] {
                        continue;
                    }
                    let mut inv = vec![0usize; axes.len()];
                    for (k, &ax) in axes.iter().enumerate() {
                        inv[ax] = k;
                    }
                    let gx = to_standard(g.view().permuted_axes(IxDyn(&inv)).to_owned());
                    accum(&mut grads, x, gx);
                }
                Op::Concat { parts, axis } => {
                    let mut offset = 0usize;
                    for p in parts {
                        let len = self.nodes[p.0].value.shape()[axis];
                        if needs[p.0] {
                            let gp = g
                                .slice_axis(ndarray::Axis(axis), ndarray::Slice::from(offset..offset + len))
                                .to_owned();
                            accum(&mut grads, p, to_standard(gp));
                        }
                        offset += len;
                    }
                }
                Op::Slice { x, axis, start, len } => {
                    if !needs[x.0] {
                        continue;
                    }
                    let mut gx = ArrayD::<F>::zeros(self.nodes[x.0].value.raw_dim());
                    gx.slice_axis_mut(ndarray::Axis(axis), ndarray::Slice::from(start..start + len))
                        .assign(&g);
                    accum(&mut grads, x, gx);
                }
                Op::Upsample2x(a) => {
                    if needs[a.0] {
                        accum(&mut grads, a, upsample2x_backward(&g));
                    }
                }
                Op::Embed { table, ids } => {
                    if !needs[table.0] {
                        continue;
                    }
                    let tshape = self.nodes[table.0].value.raw_dim();
                    let d = tshape[1];
                    let mut gt = ArrayD::<F>::zeros(tshape);
                    {
                        let gts = gt.as_slice_mut().unwrap();
                        let gs = g.as_slice().unwrap();
                        for (row, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                gts[id * d + j] = gts[id * d + j] + gs[row * d + j];
                            }
                        }
                    }
                    accum(&mut grads, table, gt);
                }
                Op::AddChanVec { x, v } => {
                    if needs[v.0] {
                        let (b, c, h, w) = dims4(&self.nodes[x.0].value);
                        let mut gv = ArrayD::<F>::zeros(IxDyn(&[b, c]));
                        {
                            let gvs = gv.as_slice_mut().unwrap();
                            let gs = g.as_slice().unwrap();
                            let hw = h * w;
                            for bi in 0..b {
                                for ci in 0..c {
                                    let base = (bi * c + ci) * hw;
                                    let s: F = gs[base..base + hw].iter().copied().sum();
                                    gvs[bi * c + ci] = s;
                                }
                            }
                        }
                        accum(&mut grads, v, gv);
                    }
                    if needs[x.0] {
                        accum(&mut grads, x, g);
                    }
                }
                Op::AddBiasLast { x, b } => {
                    if needs[b.0] {
                        let d = self.nodes[b.0].value.shape()[0];
                        let mut gb = ArrayD::<F>::zeros(IxDyn(&[d]));
                        {
                            let gbs = gb.as_slice_mut().unwrap();
                            let gs = g.as_slice().unwrap();
                            for chunk in gs.chunks_exact(d) {
                                for (acc, &ge) in gbs.iter_mut().zip(chunk) {
                                    *acc = *acc + ge;
                                }
                            }
                        }
                        accum(&mut grads, b, gb);
                    }
                    if needs[x.0] {
                        accum(&mut grads, x, g);
                    }
                }
                Op::ScaleBy { x, s } => {
                    if needs[s.0] {
                        let dot: F = g
                            .iter()
                            .zip(self.nodes[x.0].value.iter())
                            .map(|(&ge, &xe)| ge * xe)
                            .sum();
                        accum(&mut grads, s, ArrayD::from_elem(IxDyn(&[1]), dot));
                    }
                    if needs[x.0] {
                        let sval = self.nodes[s.0].value.as_slice().unwrap()[0];
                        let gx = g.mapv(|e| e * sval);
                        accum(&mut grads, x, gx);
                    }
                }
                Op::MeanAll(a) => {
                    if needs[a.0] {
                        let n = self.nodes[a.0].value.len();
                        let gv = g.as_slice().unwrap()[0] / F::from_f64(n as f64);
                        accum(&mut grads, a, ArrayD::from_elem(self.nodes[a.0].value.raw_dim(), gv));
                    }
                }
                Op::BceWithLogits { x, z } => {
                    let scale = g.as_slice().unwrap()[0]
                        / F::from_f64(self.nodes[x.0].value.len() as f64);
                    if needs[x.0] {
                        let gx = ndarray::Zip::from(&self.nodes[x.0].value)
                            .and(&self.nodes[z.0].value)
                            .map_collect(|&xe, &ze| {
                                let sig = F::one() / (F::one() + (-xe).exp());
                                (sig - ze) * scale
                            });
                        accum(&mut grads, x, gx);
                    }
                    if needs[z.0] {
                        let gz = self.nodes[x.0].value.mapv(|xe| -xe * scale);
                        accum(&mut grads, z, gz);
                    }
                }
            }
        }
        grads
    }
}

fn accum<F: Scalar>(grads: &mut [Option<ArrayD<F>>], id: Id, g: ArrayD<F>) {
    match &mut grads[id.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn to_standard<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn sigmoid<F: Scalar>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

fn dims4<F: Scalar>(a: &ArrayD<F>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-D tensor, got shape {s:?}");
    (s[0], s[1], s[2], s[3])
}

/// out = a' @ b' where a' = a or a^T etc. Inputs must be standard-layout 2-D.
pub(crate) fn gemm_2d<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, ta: bool, tb: bool) -> ArrayD<F> {
    let (ar, ac) = (a.shape()[0], a.shape()[1]);
    let (br, bc) = (b.shape()[0], b.shape()[1]);
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "gemm: inner dims {k} vs {kb}");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[m, n]));
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    unsafe {
        F::gemm(
            m, k, n,
            F::one(),
            a.as_ptr(), rsa, csa,
            b.as_ptr(), rsb, csb,
            F::zero(),
            out.as_mut_ptr(), n as isize, 1,
        );
    }
    out
}

/// Batched 3-D matmul; `ta`/`tb` transpose the last two axes per batch.
pub(crate) fn bmm_3d<F: Scalar>(a: &ArrayD<F>, b: &ArrayD<F>, ta: bool, tb: bool) -> ArrayD<F> {
    let (bs, ar, ac) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bsb, br, bc) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    assert_eq!(bs, bsb, "bmm: batch mismatch");
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (kb, n) = if tb { (bc, br) } else { (br, bc) };
    assert_eq!(k, kb, "bmm: inner dims {k} vs {kb}");
    let mut out = ArrayD::<F>::zeros(IxDyn(&[bs, m, n]));
    let as_ = a.as_slice().unwrap();
    let bs_ = b.as_slice().unwrap();
    let os_ = out.as_slice_mut().unwrap();
    let (rsa, csa) = if ta { (1, ac as isize) } else { (ac as isize, 1) };
    let (rsb, csb) = if tb { (1, bc as isize) } else { (bc as isize, 1) };
    for i in 0..bs {
        unsafe {
            F::gemm(
                m, k, n,
                F::one(),
                as_.as_ptr().add(i * ar * ac), rsa, csa,
                bs_.as_ptr().add(i * br * bc), rsb, csb,
                F::zero(),
                os_.as_mut_ptr().add(i * m * n), n as isize, 1,
            );
        }
    }
    out
}

fn conv_out_dim(h: usize, kh: usize, stride: usize, pad: usize) -> usize {
    (h + 2 * pad - kh) / stride + 1
}

/// im2col for one batch item: output (C*KH*KW, OH*OW), row-major.
fn im2col<F: Scalar>(
    x: &[F], c: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    cols: &mut [F],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ohw = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let dst = &mut cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for e in drow.iter_mut() {
                            *e = F::zero();
                        }
                        continue;
                    }
                    let src_base = (ci * h + iy as usize) * w;
                    for (ox, e) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        *e = if ix < 0 || ix >= w as isize {
                            F::zero()
                        } else {
                            x[src_base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add transpose of im2col.
fn col2im_add<F: Scalar>(
    cols: &[F], c: usize, h: usize, w: usize,
    kh: usize, kw: usize, stride: usize, pad: usize,
    x: &mut [F],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    let ohw = oh * ow;
    for ci in 0..c {
        for dy in 0..kh {
            for dx in 0..kw {
                let row = (ci * kh + dy) * kw + dx;
                let src = &cols[row * ohw..(row + 1) * ohw];
                for oy in 0..oh {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_base = (ci * h + iy as usize) * w;
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for (ox, &e) in srow.iter().enumerate() {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            x[dst_base + ix as usize] = x[dst_base + ix as usize] + e;
                        }
                    }
                }
            }
        }
    }
}

fn conv2d_forward<F: Scalar>(
    x: &ArrayD<F>, w: &ArrayD<F>, bias: Option<&ArrayD<F>>,
    stride: usize, pad: usize,
) -> ArrayD<F> {
    let (b, c, h, wd) = dims4(x);
    let (o, cw, kh, kw) = dims4(w);
    assert_eq!(c, cw, "conv2d: channel mismatch");
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, o, oh, ow]));
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut cols = vec![F::zero(); ckk * ohw];
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for bi in 0..b {
        im2col(&xs[bi * c * h * wd..], c, h, wd, kh, kw, stride, pad, &mut cols);
        // (O, CKK) @ (CKK, OHW) -> (O, OHW), written straight into the output block.
        unsafe {
            F::gemm(
                o, ckk, ohw,
                F::one(),
                ws.as_ptr(), ckk as isize, 1,
                cols.as_ptr(), ohw as isize, 1,
                F::zero(),
                os.as_mut_ptr().add(bi * o * ohw), ohw as isize, 1,
            );
        }
        if let Some(bv) = bias {
            let bs = bv.as_slice().unwrap();
            for oi in 0..o {
                let base = (bi * o + oi) * ohw;
                let add = bs[oi];
                for e in &mut os[base..base + ohw] {
                    *e = *e + add;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward<F: Scalar>(
    gy: &ArrayD<F>, x: &ArrayD<F>, w: &ArrayD<F>,
    stride: usize, pad: usize,
    need_x: bool, need_w: bool, need_b: bool,
) -> (Option<ArrayD<F>>, Option<ArrayD<F>>, Option<ArrayD<F>>) {
    let (b, c, h, wd) = dims4(x);
    let (o, _, kh, kw) = dims4(w);
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(wd, kw, stride, pad);
    let ckk = c * kh * kw;
    let ohw = oh * ow;
    let mut gx = need_x.then(|| ArrayD::<F>::zeros(x.raw_dim()));
    let mut gw = need_w.then(|| ArrayD::<F>::zeros(w.raw_dim()));
    let mut gb = need_b.then(|| ArrayD::<F>::zeros(IxDyn(&[o])));
    let mut cols = vec![F::zero(); if need_w { ckk * ohw } else { 0 }];
    let mut dcols = vec![F::zero(); if need_x { ckk * ohw } else { 0 }];
    let xs = x.as_slice().unwrap();
    let ws = w.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    for bi in 0..b {
        let gy_b = &gys[bi * o * ohw..(bi + 1) * o * ohw];
        if let Some(gb) = gb.as_mut() {
            let gbs = gb.as_slice_mut().unwrap();
            for oi in 0..o {
                let s: F = gy_b[oi * ohw..(oi + 1) * ohw].iter().copied().sum();
                gbs[oi] = gbs[oi] + s;
            }
        }
        if let Some(gw) = gw.as_mut() {
            // Weight grad: dW += dY_b (O,OHW) @ cols_b^T (OHW,CKK).
            im2col(&xs[bi * c * h * wd..], c, h, wd, kh, kw, stride, pad, &mut cols);
            unsafe {
                F::gemm(
                    o, ohw, ckk,
                    F::one(),
                    gy_b.as_ptr(), ohw as isize, 1,
                    cols.as_ptr(), 1, ohw as isize,
                    F::one(),
                    gw.as_slice_mut().unwrap().as_mut_ptr(), ckk as isize, 1,
                );
            }
        }
        if let Some(gx) = gx.as_mut() {
            // Input grad: dcols = W^T (CKK,O) @ dY_b (O,OHW), then col2im.
            unsafe {
                F::gemm(
                    ckk, o, ohw,
                    F::one(),
                    ws.as_ptr(), 1, ckk as isize,
                    gy_b.as_ptr(), ohw as isize, 1,
                    F::zero(),
                    dcols.as_mut_ptr(), ohw as isize, 1,
                );
            }
            let gxs = gx.as_slice_mut().unwrap();
            col2im_add(&dcols, c, h, wd, kh, kw, stride, pad, &mut gxs[bi * c * h * wd..(bi + 1) * c * h * wd]);
        }
    }
    (gx, gw, gb)
}

fn group_norm_forward<F: Scalar>(
    x: &ArrayD<F>, gamma: &ArrayD<F>, beta: &ArrayD<F>,
    groups: usize, eps: f64,
) -> ArrayD<F> {
    let (b, c, h, w) = dims4(x);
    assert_eq!(c % groups, 0, "group_norm: channels {c} not divisible by {groups}");
    let cg = c / groups;
    let gsize = cg * h * w;
    let mut out = x.clone();
    let os = out.as_slice_mut().unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let epsf = F::from_f64(eps);
    let nf = F::from_f64(gsize as f64);
    for bi in 0..b {
        for gi in 0..groups {
            let base = (bi * c + gi * cg) * h * w;
            let seg = &mut os[base..base + gsize];
            let mean: F = seg.iter().copied().sum::<F>() / nf;
            let var: F = seg.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / nf;
            let rstd = F::one() / (var + epsf).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let (ga, be) = (gs[ch], bs[ch]);
                for e in &mut seg[ci * h * w..(ci + 1) * h * w] {
                    *e = (*e - mean) * rstd * ga + be;
                }
            }
        }
    }
    out
}

fn group_norm_backward<F: Scalar>(
    gy: &ArrayD<F>, x: &ArrayD<F>, gamma: &ArrayD<F>,
    groups: usize, eps: f64,
) -> (ArrayD<F>, ArrayD<F>, ArrayD<F>) {
    let (b, c, h, w) = dims4(x);
    let cg = c / groups;
    let gsize = cg * h * w;
    let hw = h * w;
    let mut gx = ArrayD::<F>::zeros(x.raw_dim());
    let mut ggamma = ArrayD::<F>::zeros(IxDyn(&[c]));
    let mut gbeta = ArrayD::<F>::zeros(IxDyn(&[c]));
    let xs = x.as_slice().unwrap();
    let gys = gy.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    let ggs = ggamma.as_slice_mut().unwrap();
    let gbs = gbeta.as_slice_mut().unwrap();
    let gam = gamma.as_slice().unwrap();
    let epsf = F::from_f64(eps);
    let nf = F::from_f64(gsize as f64);
    for bi in 0..b {
        for gi in 0..groups {
            let base = (bi * c + gi * cg) * hw;
            let xseg = &xs[base..base + gsize];
            let gseg = &gys[base..base + gsize];
            let mean: F = xseg.iter().copied().sum::<F>() / nf;
            let var: F = xseg.iter().map(|&e| (e - mean) * (e - mean)).sum::<F>() / nf;
            let rstd = F::one() / (var + epsf).sqrt();
            // dxhat = gy * gamma_c; reduce mean(dxhat) and mean(dxhat * xhat) over the group.
            let mut sum_dxhat = F::zero();
            let mut sum_dxhat_xhat = F::zero();
            for ci in 0..cg {
                let ga = gam[gi * cg + ci];
                for j in ci * hw..(ci + 1) * hw {
                    let xhat = (xseg[j] - mean) * rstd;
                    let dxhat = gseg[j] * ga;
                    sum_dxhat = sum_dxhat + dxhat;
                    sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                }
            }
            let mean_dxhat = sum_dxhat / nf;
            let mean_dxhat_xhat = sum_dxhat_xhat / nf;
            let gxseg = &mut gxs[base..base + gsize];
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let ga = gam[ch];
                let mut s_ggamma = F::zero();
                let mut s_gbeta = F::zero();
                for j in ci * hw..(ci + 1) * hw {
                    let xhat = (xseg[j] - mean) * rstd;
                    let dxhat = gseg[j] * ga;
                    gxseg[j] = rstd * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                    s_ggamma = s_ggamma + gseg[j] * xhat;
                    s_gbeta = s_gbeta + gseg[j];
                }
                ggs[ch] = ggs[ch] + s_ggamma;
                gbs[ch] = gbs[ch] + s_gbeta;
            }
        }
    }
    (gx, ggamma, gbeta)
}

fn softmax_last_forward<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    let os = out.as_slice_mut().unwrap();
    for row in os.chunks_exact_mut(d) {
        let mut mx = row[0];
        for &e in row.iter() {
            if e > mx {
                mx = e;
            }
        }
        let mut sum = F::zero();
        for e in row.iter_mut() {
            *e = (*e - mx).exp();
            sum = sum + *e;
        }
        let inv = F::one() / sum;
        for e in row.iter_mut() {
            *e = *e * inv;
        }
    }
    out
}

fn upsample2x_forward<F: Scalar>(x: &ArrayD<F>) -> ArrayD<F> {
    let (b, c, h, w) = dims4(x);
    let mut out = ArrayD::<F>::zeros(IxDyn(&[b, c, 2 * h, 2 * w]));
    let xs = x.as_slice().unwrap();
    let os = out.as_slice_mut().unwrap();
    for bc in 0..b * c {
        for y in 0..h {
            let src = &xs[(bc * h + y) * w..(bc * h + y + 1) * w];
            for dy in 0..2 {
                let dst = &mut os[(bc * 2 * h + 2 * y + dy) * 2 * w..(bc * 2 * h + 2 * y + dy + 1) * 2 * w];
                for (xi, &e) in src.iter().enumerate() {
                    dst[2 * xi] = e;
                    dst[2 * xi + 1] = e;
                }
            }
        }
    }
    out
}

fn upsample2x_backward<F: Scalar>(gy: &ArrayD<F>) -> ArrayD<F> {
    let (b, c, h2, w2) = dims4(gy);
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = ArrayD::<F>::zeros(IxDyn(&[b, c, h, w]));
    let gys = gy.as_slice().unwrap();
    let gxs = gx.as_slice_mut().unwrap();
    for bc in 0..b * c {
        for y in 0..h {
            let dst = &mut gxs[(bc * h + y) * w..(bc * h + y + 1) * w];
            for dy in 0..2 {
                let src = &gys[(bc * h2 + 2 * y + dy) * w2..(bc * h2 + 2 * y + dy + 1) * w2];
                for (xi, e) in dst.iter_mut().enumerate() {
                    *e = *e + src[2 * xi] + src[2 * xi + 1];
                }
            }
        }
    }
    gx
}
