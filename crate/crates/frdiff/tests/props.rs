//! Property tests over randomized schedules, weights, and step grids.

use proptest::prelude::*;

use frdiff::reuse::{KeyframeSet, MixingSchedule};
use frdiff::sampler::ddim_step;
use frdiff::schedule::NoiseSchedule;
use frdiff::tensor::Tensor;

proptest! {
    /// The mixing weight is clamped to [0, 1] and non-decreasing in the
    /// iteration index.
    #[test]
    fn mixing_weight_clamped_and_monotone(
        n in 2usize..200,
        tau in 0.1f64..100.0,
        bias in -2.0f64..2.0,
    ) {
        let m = MixingSchedule { tau, bias, n };
        let mut last = 0.0;
        for t in 1..=n {
            let l = m.lambda(t);
            prop_assert!((0.0..=1.0).contains(&l));
            prop_assert!(l >= last - 1e-12);
            last = l;
        }
    }

    /// Cumulative signal fractions decrease strictly in diffusion time.
    #[test]
    fn alpha_bar_monotone(
        t_max in 2usize..2000,
        beta_start in 1e-6f64..5e-3,
        delta in 1e-4f64..5e-2,
    ) {
        let schedule = NoiseSchedule::linear(t_max, beta_start, beta_start + delta).unwrap();
        prop_assert_eq!(schedule.alpha_bar(0), 1.0);
        for t in 1..=t_max {
            prop_assert!(schedule.alpha_bar(t) < schedule.alpha_bar(t - 1));
            prop_assert!(schedule.alpha_bar(t) > 0.0);
        }
    }

    /// Hard rounding always lands on {0, 1}.
    #[test]
    fn rounding_is_binary(v in -10.0f64..10.0) {
        let r = Tensor::scalar(v).sigmoid().round_ste().item();
        prop_assert!(r == 0.0 || r == 1.0);
    }

    /// Two DDIM updates with one fixed score collapse into a single update
    /// over the combined interval, for arbitrary schedules and scores.
    #[test]
    fn ddim_composition_for_random_schedules(
        beta_start in 1e-6f64..1e-3,
        delta in 1e-4f64..4e-2,
        a in 3usize..1000,
        mid_frac in 0.1f64..0.9,
        x0 in -2.0f64..2.0,
        e0 in -2.0f64..2.0,
    ) {
        let schedule = NoiseSchedule::linear(1000, beta_start, beta_start + delta).unwrap();
        let b = ((a as f64) * mid_frac) as usize;
        let c = b / 2;
        prop_assume!(a > b && b > c);
        let x = Tensor::from_vec(vec![2], vec![x0, -x0 * 0.5 + 0.1]);
        let eps = Tensor::from_vec(vec![2], vec![e0, e0 * 0.3 - 0.2]);
        let two = ddim_step(&ddim_step(&x, &eps, a, b, &schedule).unwrap(), &eps, b, c, &schedule).unwrap();
        let one = ddim_step(&x, &eps, a, c, &schedule).unwrap();
        prop_assert!(two.max_abs_diff(&one) < 1e-10);
    }

    /// Uniform keyframe sets always contain iteration 1 and have
    /// ceil(n / m) members.
    #[test]
    fn uniform_keyframe_count(n in 1usize..500, m in 1usize..60) {
        let k = KeyframeSet::uniform(n, m).unwrap();
        prop_assert!(k.contains(1));
        prop_assert_eq!(k.len(), n.div_ceil(m));
        for kf in k.iter() {
            prop_assert_eq!((kf - 1) % m, 0);
        }
    }

    /// The coarse sampling grid is a subsequence of the fine grid whenever
    /// the stride divides the step count.
    #[test]
    fn time_grids_nest(n in 1usize..100, m in 1usize..10) {
        prop_assume!((n * m) <= 500);
        let schedule = NoiseSchedule::default_linear();
        let fine = schedule.ddim_times(n * m).unwrap();
        let coarse = schedule.ddim_times(n).unwrap();
        let sub: Vec<usize> = fine.iter().step_by(m).copied().collect();
        prop_assert_eq!(sub, coarse);
    }
}
