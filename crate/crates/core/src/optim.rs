//! Adam optimizer over a subset of stored parameters.

use ndarray::ArrayD;

use crate::num::Scalar;
use crate::params::{ParamId, ParamStore};

pub struct Adam<F: Scalar> {
    params: Vec<ParamId>,
    m: Vec<ArrayD<F>>,
    v: Vec<ArrayD<F>>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
}

impl<F: Scalar> Adam<F> {
    pub fn new(store: &ParamStore<F>, params: Vec<ParamId>, lr: f64) -> Self {
        let m = params.iter().map(|&p| ArrayD::zeros(store.value(p).raw_dim())).collect();
        let v = params.iter().map(|&p| ArrayD::zeros(store.value(p).raw_dim())).collect();
        Adam {
            params,
            m,
            v,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
        }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// Apply one update from the gradients accumulated in the store, then
    /// clear all gradients. Parameters with no gradient are left untouched
    /// (their moments still decay once a gradient has ever arrived — here we
    /// simply skip them, matching lazy-update semantics).
    pub fn step(&mut self, store: &mut ParamStore<F>) {
        self.step += 1;
        let b1 = F::from_f64(self.beta1);
        let b2 = F::from_f64(self.beta2);
        let one = F::one();
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let lr_t = F::from_f64(self.lr * bc2.sqrt() / bc1);
        let eps = F::from_f64(self.eps);
        for (idx, &pid) in self.params.iter().enumerate() {
            let Some(g) = store.grad(pid) else { continue };
            let g = g.clone();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            ndarray::Zip::from(&mut *m).and(&g).for_each(|me, &ge| {
                *me = b1 * *me + (one - b1) * ge;
            });
            ndarray::Zip::from(&mut *v).and(&g).for_each(|ve, &ge| {
                *ve = b2 * *ve + (one - b2) * ge * ge;
            });
            let pv = store.value_mut(pid);
            ndarray::Zip::from(pv).and(&*m).and(&*v).for_each(|p, &me, &ve| {
                *p = *p - lr_t * me / (ve.sqrt() + eps);
            });
        }
        store.zero_grads();
    }
}
