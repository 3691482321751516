//! Noise schedule, forward (noising) process, and the deterministic DDIM
//! reverse update shared by every branch. Tables are kept in f64; latents may
//! be f32 or f64.

use ndarray::ArrayD;

use crate::error::{CoreError, Result};
use crate::num::Scalar;

/// β/α/ᾱ tables over `t_count` diffusion steps.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    pub t_count: usize,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

/// Linearly spaced β from `beta_start` to `beta_end` inclusive.
pub fn linear_schedule(t_count: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if t_count < 2 {
        return Err(CoreError::Config(format!(
            "schedule needs at least 2 steps, got {t_count}"
        )));
    }
    if !(beta_start > 0.0 && beta_start < beta_end && beta_end < 1.0) {
        return Err(CoreError::Config(format!(
            "betas must satisfy 0 < start < end < 1, got [{beta_start}, {beta_end}]"
        )));
    }
    let n = t_count;
    let mut beta = Vec::with_capacity(n);
    for i in 0..n {
        beta.push(beta_start + (beta_end - beta_start) * i as f64 / (n - 1) as f64);
    }
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let mut alpha_bar = Vec::with_capacity(n);
    let mut prod = 1.0f64;
    for &a in &alpha {
        prod *= a;
        alpha_bar.push(prod);
    }
    Ok(NoiseSchedule { t_count: n, beta, alpha, alpha_bar })
}

/// Forward noising: √ᾱ_t·z0 + √(1−ᾱ_t)·eps.
pub fn q_sample<F: Scalar>(
    z0: &ArrayD<F>,
    t: usize,
    eps: &ArrayD<F>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    if z0.shape() != eps.shape() {
        return Err(CoreError::Shape(format!(
            "q_sample: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if t >= sched.t_count {
        return Err(CoreError::Argument(format!(
            "q_sample: t={t} out of range (T={})",
            sched.t_count
        )));
    }
    let ab = sched.alpha_bar[t];
    let c0 = F::from_f64(ab.sqrt());
    let c1 = F::from_f64((1.0 - ab).sqrt());
    Ok(ndarray::Zip::from(z0)
        .and(eps)
        .map_collect(|&z, &e| c0 * z + c1 * e))
}

/// Batched forward noising with one timestep per item: item `i` of the
/// leading axis gets noised to `ts[i]`.
pub fn q_sample_batch<F: Scalar>(
    z0: &ArrayD<F>,
    ts: &[usize],
    eps: &ArrayD<F>,
    sched: &NoiseSchedule,
) -> Result<ArrayD<F>> {
    if z0.shape() != eps.shape() {
        return Err(CoreError::Shape(format!(
            "q_sample_batch: z0 {:?} vs eps {:?}",
            z0.shape(),
            eps.shape()
        )));
    }
    if z0.shape()[0] != ts.len() {
        return Err(CoreError::Shape(format!(
            "q_sample_batch: {} items but {} timesteps",
            z0.shape()[0],
            ts.len()
        )));
    }
    let mut out = z0.clone();
    for (i, &t) in ts.iter().enumerate() {
        if t >= sched.t_count {
            return Err(CoreError::Argument(format!(
                "q_sample_batch: t={t} out of range (T={})",
                sched.t_count
            )));
        }
        let ab = sched.alpha_bar[t];
        let c0 = F::from_f64(ab.sqrt());
        let c1 = F::from_f64((1.0 - ab).sqrt());
        let mut slot = out.index_axis_mut(ndarray::Axis(0), i);
        let e = eps.index_axis(ndarray::Axis(0), i);
        ndarray::Zip::from(&mut slot).and(&e).for_each(|o, &ev| *o = c0 * *o + c1 * ev);
    }
    Ok(out)
}

/// One deterministic/stochastic DDIM update from step `t` to `t_prev`.
///
/// `t_prev = -1` marks the final step and returns the clamped z0 prediction.
/// For `eta > 0` a standard-normal `noise` tensor must be supplied.
pub fn ddim_step<F: Scalar>(
    z_t: &ArrayD<F>,
    eps_hat: &ArrayD<F>,
    t: usize,
    t_prev: i64,
    sched: &NoiseSchedule,
    eta: f64,
    noise: Option<&ArrayD<F>>,
) -> Result<ArrayD<F>> {
    if z_t.shape() != eps_hat.shape() {
        return Err(CoreError::Shape(format!(
            "ddim_step: z_t {:?} vs eps_hat {:?}",
            z_t.shape(),
            eps_hat.shape()
        )));
    }
    if t >= sched.t_count {
        return Err(CoreError::Argument(format!(
            "ddim_step: t={t} out of range (T={})",
            sched.t_count
        )));
    }
    if t_prev >= 0 && t as i64 <= t_prev {
        return Err(CoreError::Argument(format!(
            "ddim_step: t={t} must exceed t_prev={t_prev}"
        )));
    }
    let ab_t = sched.alpha_bar[t];
    let sqrt_ab = ab_t.sqrt();
    let sqrt_1mab = (1.0 - ab_t).sqrt();
    let one = F::one();
    let c_z = F::from_f64(1.0 / sqrt_ab);
    let c_e = F::from_f64(sqrt_1mab / sqrt_ab);
    // Predicted z0, clamped to the valid latent range.
    let z0_pred = ndarray::Zip::from(z_t).and(eps_hat).map_collect(|&z, &e| {
        let v = c_z * z - c_e * e;
        v.min(one).max(-one)
    });
    if t_prev < 0 {
        return Ok(z0_pred);
    }
    let ab_prev = sched.alpha_bar[t_prev as usize];
    let sigma = eta
        * ((1.0 - ab_prev) / (1.0 - ab_t)).sqrt()
        * (1.0 - ab_t / ab_prev).sqrt();
    let dir_coeff = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
    let c0 = F::from_f64(ab_prev.sqrt());
    let c1 = F::from_f64(dir_coeff);
    let mut out = ndarray::Zip::from(&z0_pred)
        .and(eps_hat)
        .map_collect(|&z0, &e| c0 * z0 + c1 * e);
    if sigma > 0.0 {
        let n = noise.ok_or_else(|| {
            CoreError::Argument("ddim_step: eta > 0 requires a noise tensor".into())
        })?;
        if n.shape() != z_t.shape() {
            return Err(CoreError::Shape("ddim_step: noise shape mismatch".into()));
        }
        let cs = F::from_f64(sigma);
        ndarray::Zip::from(&mut out).and(n).for_each(|o, &ne| *o = *o + cs * ne);
    }
    Ok(out)
}

/// Evenly spaced, strictly decreasing timesteps from T−1 down to 0.
pub fn timestep_subsequence(t_count: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps < 2 || n_steps > t_count {
        return Err(CoreError::Config(format!(
            "inference steps must be in [2, T={t_count}], got {n_steps}"
        )));
    }
    let mut ts = Vec::with_capacity(n_steps);
    for i in 0..n_steps {
        let pos = (n_steps - 1 - i) as f64 * (t_count - 1) as f64 / (n_steps - 1) as f64;
        ts.push(pos.round() as usize);
    }
    debug_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    Ok(ts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn default_schedule_endpoints() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        assert_eq!(s.t_count, 1000);
        assert!((s.alpha_bar[0] - 0.9999).abs() < 1e-12);
        assert!(s.alpha_bar[0] > 0.99);
        assert!(s.alpha_bar[999] < 0.01);
        assert!((s.beta[999] - 0.02).abs() < 1e-15);
    }

    #[test]
    fn two_step_schedule_hand_product() {
        let s = linear_schedule(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar[0] - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar[1] - 0.72).abs() < 1e-15);
    }

    #[test]
    fn invalid_schedules_rejected() {
        assert!(matches!(linear_schedule(1, 1e-4, 0.02), Err(CoreError::Config(_))));
        assert!(matches!(linear_schedule(10, 0.1, 1.0), Err(CoreError::Config(_))));
        assert!(matches!(linear_schedule(10, 0.2, 0.1), Err(CoreError::Config(_))));
        assert!(matches!(linear_schedule(10, 0.0, 0.1), Err(CoreError::Config(_))));
    }

    #[test]
    fn q_sample_limits_and_closed_form() {
        // Hand-built tables to hit the exact ᾱ ∈ {1, 0, 0.25} cases.
        let sched = NoiseSchedule {
            t_count: 3,
            beta: vec![0.0, 0.0, 0.0],
            alpha: vec![0.0, 0.0, 0.0],
            alpha_bar: vec![1.0, 0.0, 0.25],
        };
        let z0 = ArrayD::from_elem(IxDyn(&[1]), 1.0f64);
        let eps = ArrayD::from_elem(IxDyn(&[1]), 2.0f64);
        let a = q_sample(&z0, 0, &eps, &sched).unwrap();
        assert_eq!(a[[0]], 1.0);
        let b = q_sample(&z0, 1, &eps, &sched).unwrap();
        assert_eq!(b[[0]], 2.0);
        let c = q_sample(&z0, 2, &eps, &sched).unwrap();
        let expect = 0.25f64.sqrt() * 1.0 + 0.75f64.sqrt() * 2.0;
        assert!((c[[0]] - expect).abs() < 1e-15);
        assert!((c[[0]] - 2.2320508).abs() < 1e-6);
    }

    #[test]
    fn q_sample_shape_mismatch_is_error() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let z0 = ArrayD::<f64>::zeros(IxDyn(&[4]));
        let eps = ArrayD::<f64>::zeros(IxDyn(&[5]));
        assert!(matches!(q_sample(&z0, 0, &eps, &s), Err(CoreError::Shape(_))));
    }

    #[test]
    fn ddim_final_step_inverts_q_sample() {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.3f64, -0.8, 0.99, -0.2]).unwrap();
        let eps = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.5f64, -0.4, 0.0, 2.0]).unwrap();
        let t = 0usize;
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let rec = ddim_step(&zt, &eps, t, -1, &s, 0.0, None).unwrap();
        for i in 0..4 {
            assert!((rec[[i]] - z0[[i]]).abs() < 1e-12, "i={i}");
        }
    }

    #[test]
    fn ddim_step_matches_hand_computed_update() {
        // T=2 schedule: ᾱ = [0.9, 0.72]. One step from t=1 to t=0, eta=0.
        let s = linear_schedule(2, 0.1, 0.2).unwrap();
        let z1 = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.5f64, -0.25, 1.2, 0.0]).unwrap();
        let eh = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.1f64, 0.7, -0.3, 0.9]).unwrap();
        let got = ddim_step(&z1, &eh, 1, 0, &s, 0.0, None).unwrap();
        for i in 0..4 {
            let z0p = ((z1[[i]] - (1.0f64 - 0.72).sqrt() * eh[[i]]) / 0.72f64.sqrt())
                .clamp(-1.0, 1.0);
            let expect = 0.9f64.sqrt() * z0p + (1.0f64 - 0.9).sqrt() * eh[[i]];
            assert!((got[[i]] - expect).abs() < 1e-14, "i={i}: {} vs {expect}", got[[i]]);
        }
    }

    #[test]
    fn ddim_step_rejects_non_decreasing_t() {
        let s = linear_schedule(10, 1e-4, 0.02).unwrap();
        let z = ArrayD::<f64>::zeros(IxDyn(&[2]));
        assert!(matches!(
            ddim_step(&z, &z, 3, 3, &s, 0.0, None),
            Err(CoreError::Argument(_))
        ));
        assert!(matches!(
            ddim_step(&z, &z, 3, 5, &s, 0.0, None),
            Err(CoreError::Argument(_))
        ));
    }

    #[test]
    fn ddim_step_is_deterministic() {
        let s = linear_schedule(100, 1e-4, 0.02).unwrap();
        let z = ArrayD::from_shape_vec(IxDyn(&[3]), vec![0.4f64, -0.9, 0.1]).unwrap();
        let e = ArrayD::from_shape_vec(IxDyn(&[3]), vec![-0.2f64, 0.5, 0.8]).unwrap();
        let a = ddim_step(&z, &e, 50, 25, &s, 0.0, None).unwrap();
        let b = ddim_step(&z, &e, 50, 25, &s, 0.0, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn subsequence_endpoints_and_spacing() {
        let ts = timestep_subsequence(1000, 50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 0);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));

        let full = timestep_subsequence(10, 10).unwrap();
        assert_eq!(full, vec![9, 8, 7, 6, 5, 4, 3, 2, 1, 0]);

        assert!(matches!(timestep_subsequence(10, 1), Err(CoreError::Config(_))));
        assert!(matches!(timestep_subsequence(10, 11), Err(CoreError::Config(_))));
    }

    #[test]
    fn q_sample_moments_match_schedule() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        for &t in &[3usize, 400, 980] {
            let z0 = ArrayD::from_elem(IxDyn(&[1]), 0.6f64);
            let n = 10_000;
            let mut vals = Vec::with_capacity(n);
            for _ in 0..n {
                let e: f64 = StandardNormal.sample(&mut rng);
                let eps = ArrayD::from_elem(IxDyn(&[1]), e);
                vals.push(q_sample(&z0, t, &eps, &s).unwrap()[[0]]);
            }
            let mean = vals.iter().sum::<f64>() / n as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let ab = s.alpha_bar[t];
            assert!(
                (mean - ab.sqrt() * 0.6).abs() < 0.05,
                "t={t}: mean {mean} vs {}",
                ab.sqrt() * 0.6
            );
            assert!((var - (1.0 - ab)).abs() < 0.05, "t={t}: var {var} vs {}", 1.0 - ab);
        }
    }
}
