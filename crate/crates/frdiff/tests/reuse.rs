//! Keyframe schedules, score mixing, and feature-reuse sampling behavior.

mod common;

use frdiff::model::{Arch, NetworkConfig, ScoreNetwork};
use frdiff::reuse::{frdiff_sample, mixed_score, KeyframeSet, MixingSchedule, ReuseScope};
use frdiff::sampler::{self, NoHooks, SamplerConfig};
use frdiff::schedule::NoiseSchedule;
use frdiff::tensor::Tensor;

fn unet(width: usize, depth: usize) -> ScoreNetwork {
    ScoreNetwork::build(NetworkConfig {
        arch: Arch::ToyUnet,
        width,
        depth,
        data_shape: vec![1, 8, 8],
        num_classes: 2,
        seed: 21,
    })
    .unwrap()
}

#[test]
fn uniform_keyframes_examples() {
    let k = KeyframeSet::uniform(6, 2).unwrap();
    assert_eq!(k.iter().collect::<Vec<_>>(), vec![1, 3, 5]);
    let k = KeyframeSet::uniform(50, 3).unwrap();
    assert_eq!(k.len(), 17);
    assert!(k.contains(1) && k.contains(4) && k.contains(49));
    // interval 1 keeps every iteration
    assert_eq!(KeyframeSet::uniform(10, 1).unwrap().len(), 10);
}

#[test]
fn first_iteration_is_always_a_keyframe() {
    let k = KeyframeSet::from_members(10, [4, 8]).unwrap();
    assert!(k.contains(1));
    assert_eq!(k.len(), 3);
    assert!(KeyframeSet::from_members(10, [0]).is_err());
    assert!(KeyframeSet::from_members(10, [11]).is_err());
}

#[test]
fn mixing_weight_examples() {
    // tau = 30, bias = 0.5, N = 50: hard sigmoid over the iteration index
    let m = MixingSchedule::new(50);
    assert_eq!(m.lambda(10), 0.0); // early (noisy) iterations reuse fully
    assert_eq!(m.lambda(45), 1.0); // late iterations ignore the stored score
    let mid = m.lambda(25); // (30*(0.5-0.5)+2)/4 = 0.5
    assert!((mid - 0.5).abs() < 1e-12);
    // monotone over the whole range
    for t in 1..50 {
        assert!(m.lambda(t) <= m.lambda(t + 1) + 1e-15);
    }
    assert_eq!(MixingSchedule::always_reuse(50).lambda(49), 0.0);
    assert_eq!(MixingSchedule::never_reuse(50).lambda(2), 1.0);
}

#[test]
fn mixed_score_values() {
    let fresh = Tensor::scalar(2.0);
    let stored = Tensor::scalar(0.0);
    assert_eq!(mixed_score(Some(&fresh), &stored, 0.5).unwrap().item(), 1.0);
    assert_eq!(mixed_score(Some(&fresh), &stored, 1.0).unwrap().item(), 2.0);
    assert_eq!(mixed_score(None, &stored, 0.0).unwrap().item(), 0.0);
    assert!(mixed_score(None, &stored, 0.3).is_err());
    assert!(mixed_score(Some(&fresh), &stored, 1.5).is_err());
}

/// Interval 1 makes every step a keyframe: reuse must reproduce the
/// baseline bit for bit.
#[test]
fn interval_one_equals_baseline() {
    let net = unet(8, 4);
    let schedule = NoiseSchedule::default_linear();
    for seed in 0..4 {
        let cfg = SamplerConfig::new(8, seed);
        let base = sampler::sample(&net, &cfg, &schedule, &mut NoHooks).unwrap();
        let kf = KeyframeSet::uniform(8, 1).unwrap();
        let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::new(8), &schedule, ReuseScope::All).unwrap();
        assert!(base.final_sample().bit_eq(fr.final_sample()), "seed {seed}");
    }
}

#[test]
fn reuse_skips_s_ops_between_keyframes() {
    let net = unet(8, 4);
    let schedule = NoiseSchedule::default_linear();
    let cfg = SamplerConfig::new(10, 3);
    let kf = KeyframeSet::uniform(10, 2).unwrap();
    // force every non-keyframe to re-evaluate with cached features
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::never_reuse(10), &schedule, ReuseScope::All).unwrap();
    let n_blocks = net.num_blocks();
    for step in &fr.steps {
        if step.is_keyframe {
            assert_eq!(step.cost.s_ops_executed, n_blocks);
            assert_eq!(step.cost.s_ops_skipped, 0);
        } else {
            assert_eq!(step.cost.s_ops_executed, 0);
            assert_eq!(step.cost.s_ops_skipped, n_blocks);
            assert_eq!(step.cost.network_evals, 1);
        }
    }
}

#[test]
fn full_reuse_skips_network_evaluations() {
    let net = unet(8, 4);
    let schedule = NoiseSchedule::default_linear();
    let cfg = SamplerConfig::new(10, 3);
    let kf = KeyframeSet::uniform(10, 5).unwrap();
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::always_reuse(10), &schedule, ReuseScope::All).unwrap();
    let total = fr.total_cost();
    assert_eq!(total.network_evals, 2); // only the two keyframes
    for step in &fr.steps {
        assert_eq!(step.cost.network_evals, if step.is_keyframe { 1 } else { 0 });
    }
}

/// Ledger conservation: per step, executed + skipped S-ops equals the
/// block count times the number of evaluations that touched the blocks.
#[test]
fn ledger_accounts_for_every_block() {
    let net = unet(8, 4);
    let schedule = NoiseSchedule::default_linear();
    let n_blocks = net.num_blocks();
    let cfg = SamplerConfig::new(12, 9).with_cond(1, 1.0);
    let kf = KeyframeSet::uniform(12, 3).unwrap();
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::new(12), &schedule, ReuseScope::All).unwrap();
    for step in &fr.steps {
        assert_eq!(
            step.cost.s_ops_executed + step.cost.s_ops_skipped,
            n_blocks * step.cost.network_evals,
            "iteration {}",
            step.iter
        );
    }
}

/// Scoped reuse leaves the excluded block family fresh on every evaluation.
#[test]
fn reuse_scope_limits_caching() {
    let net = unet(8, 4); // alternating resnet / transformer blocks
    let schedule = NoiseSchedule::default_linear();
    let cfg = SamplerConfig::new(6, 2);
    let kf = KeyframeSet::uniform(6, 2).unwrap();
    let kinds = net.block_kinds();
    let n_resnet = kinds.iter().filter(|k| !k.is_transformer()).count();
    let n_trans = kinds.len() - n_resnet;
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::never_reuse(6), &schedule, ReuseScope::ResnetOnly).unwrap();
    for step in &fr.steps {
        if !step.is_keyframe {
            assert_eq!(step.cost.s_ops_skipped, n_resnet);
            assert_eq!(step.cost.s_ops_executed, n_trans);
        }
    }
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::never_reuse(6), &schedule, ReuseScope::TransformerOnly).unwrap();
    for step in &fr.steps {
        if !step.is_keyframe {
            assert_eq!(step.cost.s_ops_skipped, n_trans);
            assert_eq!(step.cost.s_ops_executed, n_resnet);
        }
    }
}

/// Under guidance the conditional and unconditional caches must not mix:
/// reuse with interval 1 (all keyframes) equals the baseline, and reuse
/// with caching still produces finite, shape-correct output.
#[test]
fn guided_reuse_keeps_branches_separate() {
    let net = unet(8, 4);
    let schedule = NoiseSchedule::default_linear();
    let cfg = SamplerConfig::new(8, 4).with_cond(0, 2.0);
    let base = sampler::sample(&net, &cfg, &schedule, &mut NoHooks).unwrap();
    let kf = KeyframeSet::uniform(8, 1).unwrap();
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::new(8), &schedule, ReuseScope::All).unwrap();
    assert!(base.final_sample().bit_eq(fr.final_sample()));

    let kf = KeyframeSet::uniform(8, 2).unwrap();
    let fr = frdiff_sample(&net, &cfg, &kf, MixingSchedule::new(8), &schedule, ReuseScope::All).unwrap();
    assert!(fr.final_sample().data().iter().all(|v| v.is_finite()));
    // both branches evaluated at every non-skipped step
    for step in &fr.steps {
        assert!(step.cost.network_evals == 2 || step.lambda == 0.0);
    }
}

/// The reuse ledger reports lambda = 1 at keyframes and the schedule value
/// elsewhere.
#[test]
fn ledger_lambda_column() {
    let net = unet(8, 2);
    let schedule = NoiseSchedule::default_linear();
    let cfg = SamplerConfig::new(10, 0);
    let kf = KeyframeSet::uniform(10, 3).unwrap();
    let mix = MixingSchedule::new(10);
    let fr = frdiff_sample(&net, &cfg, &kf, mix, &schedule, ReuseScope::All).unwrap();
    for step in &fr.steps {
        if step.is_keyframe {
            assert_eq!(step.lambda, 1.0);
        } else {
            assert_eq!(step.lambda, mix.lambda(step.iter));
        }
    }
}
