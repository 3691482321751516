//! Central-difference gradient verification.
//!
//! A model forward is expressed as a closure that rebuilds the computation on
//! a fresh tape from the current parameter values and returns the scalar loss
//! node. The checker runs one analytic backward pass, then perturbs every
//! parameter element by ±h and compares the finite-difference quotient
//! against the analytic gradient. Everything runs in f64.

use ndarray::ArrayD;
use rand::Rng;

use crate::params::{ParamId, ParamStore};
use crate::tape::{Id, Tape};

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub worst_abs_err: f64,
    pub worst_rel_err: f64,
    pub mismatches: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.mismatches.is_empty()
    }
}

/// Tolerance rule: an element passes if the absolute error is within
/// `abs_tol`, or within `rel_tol` of the larger gradient magnitude.
#[derive(Debug, Clone, Copy)]
pub struct GradCheckSettings {
    pub h: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

pub fn check_gradients<B>(
    store: &mut ParamStore<f64>,
    params: &[ParamId],
    settings: GradCheckSettings,
    mut build: B,
) -> GradCheckReport
where
    B: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Id,
{
    store.zero_grads();
    let mut tape = Tape::new();
    let root = build(&mut tape, store);
    tape.backward(root, store);
    let analytic: Vec<ArrayD<f64>> = params
        .iter()
        .map(|&p| {
            store
                .grad(p)
                .cloned()
                .unwrap_or_else(|| ArrayD::zeros(store.value(p).raw_dim()))
        })
        .collect();

    let mut report = GradCheckReport {
        checked: 0,
        worst_abs_err: 0.0,
        worst_rel_err: 0.0,
        mismatches: Vec::new(),
    };

    for (pi, &pid) in params.iter().enumerate() {
        let n = store.value(pid).len();
        for j in 0..n {
            let orig = store.value(pid).as_slice().unwrap()[j];

            store.value_mut(pid).as_slice_mut().unwrap()[j] = orig + settings.h;
            let mut t = Tape::new();
            let r = build(&mut t, store);
            let lp = t.value(r).as_slice().unwrap()[0];

            store.value_mut(pid).as_slice_mut().unwrap()[j] = orig - settings.h;
            let mut t = Tape::new();
            let r = build(&mut t, store);
            let lm = t.value(r).as_slice().unwrap()[0];

            store.value_mut(pid).as_slice_mut().unwrap()[j] = orig;

            let numeric = (lp - lm) / (2.0 * settings.h);
            let a = analytic[pi].as_slice().unwrap()[j];
            let abs_err = (a - numeric).abs();
            let scale = a.abs().max(numeric.abs());
            let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
            report.checked += 1;
            report.worst_abs_err = report.worst_abs_err.max(abs_err);
            if scale > settings.abs_tol {
                report.worst_rel_err = report.worst_rel_err.max(rel_err);
            }
            let ok = abs_err <= settings.abs_tol || rel_err <= settings.rel_tol;
            if !ok {
                report.mismatches.push(GradMismatch {
                    param: store.name(pid).to_string(),
                    index: j,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    report
}

/// Fill an array with uniform samples from [lo, hi) — convenience for tests.
pub fn fill_uniform<R: Rng>(a: &mut ArrayD<f64>, rng: &mut R, lo: f64, hi: f64) {
    for e in a.iter_mut() {
        *e = rng.gen_range(lo..hi);
    }
}

pub fn random_array<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> ArrayD<f64> {
    let mut a = ArrayD::zeros(ndarray::IxDyn(shape));
    fill_uniform(&mut a, rng, lo, hi);
    a
}
