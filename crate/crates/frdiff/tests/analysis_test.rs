//! Spectral analysis, the cost model, and the reduced-step equivalence.

mod common;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use frdiff::analysis::{radial_psd, temporal_change, verify_nfe_equivalence, CostModel};
use frdiff::data::normal_tensor;
use frdiff::model::{Arch, NetworkConfig, ScoreNetwork};
use frdiff::reuse::{KeyframeSet, MixingSchedule};
use frdiff::schedule::NoiseSchedule;
use frdiff::tensor::Tensor;

fn unet(seed: u64) -> ScoreNetwork {
    ScoreNetwork::build(NetworkConfig {
        arch: Arch::ToyUnet,
        width: 8,
        depth: 4,
        data_shape: vec![1, 8, 8],
        num_classes: 2,
        seed,
    })
    .unwrap()
}

/// The ring powers preserve total energy (Parseval).
#[test]
fn psd_rings_preserve_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let imgs: Vec<Tensor> = (0..8).map(|_| normal_tensor(&[1, 8, 8], &mut rng)).collect();
    let curve = radial_psd(&imgs).unwrap();
    let spectral: f64 = curve.ring_power.iter().sum();
    let spatial: f64 = imgs
        .iter()
        .map(|im| im.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / imgs.len() as f64;
    assert!((spectral - spatial).abs() < 1e-6 * spatial.abs().max(1.0));
}

/// White noise has a flat spectrum: every ring's mean power is near the
/// per-pixel variance.
#[test]
fn white_noise_spectrum_is_flat() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let n = 256;
    let imgs: Vec<Tensor> = (0..n).map(|_| normal_tensor(&[1, 16, 16], &mut rng)).collect();
    let curve = radial_psd(&imgs).unwrap();
    // each ring's batch-mean log power should be near log10(1); allow 3
    // sigma of the batch-mean fluctuation (~1/sqrt(count*n))
    for (ring, lp) in curve.mean_log_power.iter().enumerate() {
        assert!(
            lp.abs() < 0.25,
            "ring {ring}: mean log power {lp} deviates from flat"
        );
    }
}

#[test]
fn psd_rejects_mixed_shapes() {
    let a = Tensor::zeros(&[1, 8, 8]);
    let b = Tensor::zeros(&[1, 4, 4]);
    assert!(radial_psd(&[a, b]).is_err());
}

#[test]
fn speedup_examples() {
    // every step a keyframe: no speedup
    let model = CostModel::aggregate(50, 0.92).unwrap();
    let all = KeyframeSet::uniform(50, 1).unwrap();
    assert!((model.speedup(&all, None).unwrap() - 1.0).abs() < 1e-12);

    // interval 2: 25 keyframes, 25 reuse steps at cost 0.08 each
    let half = KeyframeSet::uniform(50, 2).unwrap();
    let s = model.speedup(&half, None).unwrap();
    let expect = 50.0 / (25.0 + 25.0 * 0.08);
    assert!((s - expect).abs() < 1e-9);
    assert!((s - 1.852).abs() < 1e-3);
}

#[test]
fn speedup_grows_with_interval() {
    let model = CostModel::aggregate(50, 0.92).unwrap();
    let mut last = 0.0;
    for m in 1..=25 {
        let kf = KeyframeSet::uniform(50, m).unwrap();
        let s = model.speedup(&kf, None).unwrap();
        assert!(s >= last - 1e-12, "m={m}");
        last = s;
    }
    // bounded by the non-skippable fraction
    assert!(last < 1.0 / (1.0 - 0.92) + 1e-9);
}

#[test]
fn free_skip_accounting_increases_speedup() {
    let mut model = CostModel::aggregate(50, 0.92).unwrap();
    let kf = KeyframeSet::uniform(50, 25).unwrap();
    let mixing = MixingSchedule::new(50);
    let plain = model.speedup(&kf, Some(&mixing)).unwrap();
    model.count_skipped_steps_free = true;
    let free = model.speedup(&kf, Some(&mixing)).unwrap();
    assert!(free > plain);
}

/// Reusing the stored score between keyframes is the same computation as a
/// reduced-step run over the keyframe times.
#[test]
fn reduced_step_equivalence() {
    let schedule = NoiseSchedule::default_linear();
    for &(net_seed, stride) in &[(1u64, 2usize), (2, 5), (9, 2)] {
        let net = unet(net_seed);
        let report = verify_nfe_equivalence(&net, &schedule, 10, stride, 4).unwrap();
        assert!(
            report.max_abs_dev < 1e-10,
            "seed {net_seed} stride {stride}: dev {}",
            report.max_abs_dev
        );
        assert!(!report.uneven_windows);
        assert_eq!(report.reduced_steps, 10 / stride);
    }
}

#[test]
fn uneven_stride_is_flagged_but_still_exact() {
    let net = unet(5);
    let schedule = NoiseSchedule::default_linear();
    let report = verify_nfe_equivalence(&net, &schedule, 10, 3, 4).unwrap();
    assert!(report.uneven_windows);
    // explicit matching time grids keep the identity exact regardless
    assert!(report.max_abs_dev < 1e-10);
}

#[test]
fn temporal_change_shape_and_determinism() {
    let net = unet(3);
    let schedule = NoiseSchedule::default_linear();
    let a = temporal_change(&net, &schedule, 6, 2, 100).unwrap();
    assert_eq!(a.per_layer.len(), net.num_blocks());
    assert_eq!(a.mean_per_step.len(), 5);
    assert!(a.per_layer.iter().flatten().all(|v| v.is_finite() && *v >= 0.0));
    let b = temporal_change(&net, &schedule, 6, 2, 100).unwrap();
    assert_eq!(a.mean_per_step, b.mean_per_step);
}
