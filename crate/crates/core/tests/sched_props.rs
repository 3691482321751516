//! Property tests for the noise schedule and DDIM sampler.

use ndarray::{ArrayD, IxDyn};
use proptest::prelude::*;

use twindiff_core::sched::{
    ddim_step, linear_schedule, q_sample, q_sample_batch, timestep_subsequence,
};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn alpha_bar_strictly_decreasing(
        t_count in 2usize..500,
        start in 1e-5f64..0.01,
        spread in 0.001f64..0.5,
    ) {
        let end = (start + spread).min(0.999);
        let s = linear_schedule(t_count, start, end).unwrap();
        prop_assert!(s.alpha_bar.windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bar.iter().all(|&a| a > 0.0 && a < 1.0));
    }

    #[test]
    fn subsequence_is_strictly_decreasing_with_pinned_endpoints(
        t_count in 2usize..2000,
        frac in 0.0f64..1.0,
    ) {
        let n = 2 + ((t_count - 2) as f64 * frac) as usize;
        let ts = timestep_subsequence(t_count, n).unwrap();
        prop_assert_eq!(ts.len(), n);
        prop_assert_eq!(ts[0], t_count - 1);
        prop_assert_eq!(*ts.last().unwrap(), 0);
        prop_assert!(ts.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn noising_then_final_inversion_recovers_z0(
        z0v in prop::collection::vec(-0.99f64..0.99, 4),
        epsv in prop::collection::vec(-2.0f64..2.0, 4),
        t in 0usize..1000,
    ) {
        let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
        let z0 = ArrayD::from_shape_vec(IxDyn(&[4]), z0v).unwrap();
        let eps = ArrayD::from_shape_vec(IxDyn(&[4]), epsv).unwrap();
        let zt = q_sample(&z0, t, &eps, &s).unwrap();
        let rec = ddim_step(&zt, &eps, t, -1, &s, 0.0, None).unwrap();
        for i in 0..4 {
            prop_assert!((rec[[i]] - z0[[i]]).abs() < 1e-9);
        }
    }
}

#[test]
fn per_item_noising_matches_scalar_noising_exactly() {
    // The batched form with one timestep per item must agree bitwise with
    // noising each leading-axis slice on its own.
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let n = 4 * 2 * 3 * 3;
    let z0 = ArrayD::from_shape_vec(
        IxDyn(&[4, 2, 3, 3]),
        (0..n).map(|i| ((i * 37 % 101) as f64 / 50.0 - 1.0) as f32).collect(),
    )
    .unwrap();
    let eps = ArrayD::from_shape_vec(
        IxDyn(&[4, 2, 3, 3]),
        (0..n).map(|i| ((i * 53 % 97) as f64 / 24.0 - 2.0) as f32).collect(),
    )
    .unwrap();
    let ts = [0usize, 999, 500, 123];
    let out = q_sample_batch(&z0, &ts, &eps, &s).unwrap();
    for (i, &t) in ts.iter().enumerate() {
        let zi = z0.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
        let ei = eps.index_axis(ndarray::Axis(0), i).to_owned().into_dyn();
        let want = q_sample(&zi, t, &ei, &s).unwrap();
        let got = out.index_axis(ndarray::Axis(0), i);
        let wb: Vec<u32> = want.iter().map(|v| v.to_bits()).collect();
        let gb: Vec<u32> = got.iter().map(|v| v.to_bits()).collect();
        assert_eq!(wb, gb, "item {i} differs");
    }
    // Error paths: bad timestep count and out-of-range t.
    assert!(q_sample_batch(&z0, &[1, 2], &eps, &s).is_err());
    assert!(q_sample_batch(&z0, &[0, 1, 2, 1000], &eps, &s).is_err());
}

#[test]
fn composed_ddim_walk_is_byte_identical() {
    // Full eta=0 reverse walk with a fixed fake eps at every step: two runs
    // must agree bitwise.
    let s = linear_schedule(1000, 1e-4, 0.02).unwrap();
    let ts = timestep_subsequence(1000, 25).unwrap();
    let walk = || {
        let mut z = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.9f32, -1.3, 0.2, 0.0]).unwrap();
        for (i, &t) in ts.iter().enumerate() {
            let eps_hat = z.mapv(|v| (v * 0.37).sin());
            let t_prev = if i + 1 < ts.len() { ts[i + 1] as i64 } else { -1 };
            z = ddim_step(&z, &eps_hat, t, t_prev, &s, 0.0, None).unwrap();
        }
        z
    };
    let a = walk();
    let b = walk();
    let ab: Vec<u32> = a.iter().map(|v| v.to_bits()).collect();
    let bb: Vec<u32> = b.iter().map(|v| v.to_bits()).collect();
    assert_eq!(ab, bb);
}
