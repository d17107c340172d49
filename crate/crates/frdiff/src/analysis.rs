//! Measurement instruments: per-layer temporal feature change, radially
//! averaged power spectra, the analytic cost model, and the reduced-step
//! equivalence check.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::model::ScoreNetwork;
use crate::reuse::{self, KeyframeSet, MixingSchedule, ReuseScope};
use crate::sampler::{self, RecordingHooks, SamplerConfig};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Per-layer temporal change of the residual-branch outputs along sampling
/// trajectories: mean over seeds of |F_i(t) - F_i(t')|_1 / |t - t'|.
pub struct SimilarityReport {
    /// [layer][step_pair]: change between consecutive iterations, indexed
    /// by the later iteration (2..=N).
    pub per_layer: Vec<Vec<f64>>,
    pub mean_per_step: Vec<f64>,
    pub var_per_step: Vec<f64>,
    pub n_steps: usize,
    pub n_layers: usize,
}

impl SimilarityReport {
    /// CSV rows: iteration, then one column per layer, then mean and var.
    pub fn rows(&self) -> Vec<Vec<String>> {
        (0..self.n_steps - 1)
            .map(|s| {
                let mut row = vec![(s + 2).to_string()];
                for l in 0..self.n_layers {
                    row.push(format!("{:.6e}", self.per_layer[l][s]));
                }
                row.push(format!("{:.6e}", self.mean_per_step[s]));
                row.push(format!("{:.6e}", self.var_per_step[s]));
                row
            })
            .collect()
    }

    pub fn header(&self) -> String {
        let mut cols = vec!["iteration".to_string()];
        for l in 0..self.n_layers {
            cols.push(format!("layer{l}"));
        }
        cols.push("mean".into());
        cols.push("var".into());
        cols.join(",")
    }
}

/// Run `n_trajectories` baseline samplings and measure how fast each
/// block's residual output drifts between consecutive iterations.
pub fn temporal_change(
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    n_steps: usize,
    n_trajectories: usize,
    base_seed: u64,
) -> Result<SimilarityReport> {
    if n_steps < 2 {
        return Err(Error::config("temporal change needs at least 2 sampling steps"));
    }
    if n_trajectories == 0 {
        return Err(Error::config("temporal change needs at least 1 trajectory"));
    }
    let times = schedule.ddim_times(n_steps)?;
    let n_layers = net.block_kinds().len();
    let mut accum = vec![vec![0.0; n_steps - 1]; n_layers];
    for k in 0..n_trajectories {
        let mut hooks = RecordingHooks::new();
        let cfg = SamplerConfig::new(n_steps, base_seed.wrapping_add(k as u64));
        sampler::sample(net, &cfg, schedule, &mut hooks)?;
        for s in 0..n_steps - 1 {
            let dt = (times[s] - times[s + 1]).max(1) as f64;
            for l in 0..n_layers {
                let a = hooks.features[s][l].data();
                let b = hooks.features[s + 1][l].data();
                let l1: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum();
                accum[l][s] += l1 / dt;
            }
        }
    }
    let per_layer: Vec<Vec<f64>> = accum
        .into_iter()
        .map(|row| row.into_iter().map(|v| v / n_trajectories as f64).collect())
        .collect();
    let mut mean_per_step = vec![0.0; n_steps - 1];
    let mut var_per_step = vec![0.0; n_steps - 1];
    for s in 0..n_steps - 1 {
        let vals: Vec<f64> = (0..n_layers).map(|l| per_layer[l][s]).collect();
        let m = vals.iter().sum::<f64>() / n_layers as f64;
        mean_per_step[s] = m;
        var_per_step[s] = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n_layers as f64;
    }
    Ok(SimilarityReport { per_layer, mean_per_step, var_per_step, n_steps, n_layers })
}

/// Radially averaged power spectral density of a batch of single-channel
/// images.
pub struct PsdCurve {
    /// log10 of the batch-averaged mean power in each integer frequency ring.
    pub mean_log_power: Vec<f64>,
    /// Batch-averaged total power per ring (Parseval: rings sum to the mean
    /// per-image sum of squared pixels).
    pub ring_power: Vec<f64>,
    pub samples: usize,
}

pub fn radial_psd(images: &[Tensor]) -> Result<PsdCurve> {
    let first = images.first().ok_or_else(|| Error::config("psd needs at least one image"))?;
    let shape = first.shape().to_vec();
    if shape.len() != 3 || shape[0] != 1 {
        return Err(Error::contract("psd expects [1, h, w] images"));
    }
    let (h, w) = (shape[1], shape[2]);
    let n_rings = ring_index(h / 2, w / 2, h, w) + 1;
    let mut ring_sum = vec![0.0; n_rings];
    let mut ring_mean_sum = vec![0.0; n_rings];
    let mut ring_count = vec![0usize; n_rings];
    let mut planner = FftPlanner::<f64>::new();
    let fft_w = planner.plan_fft_forward(w);
    let fft_h = planner.plan_fft_forward(h);
    for img in images {
        if img.shape() != shape.as_slice() {
            return Err(Error::contract("psd images must share one shape"));
        }
        // 2-D FFT: rows then columns.
        let mut grid: Vec<Complex<f64>> =
            img.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
        for r in 0..h {
            fft_w.process(&mut grid[r * w..(r + 1) * w]);
        }
        let mut col = vec![Complex::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = grid[r * w + c];
            }
            fft_h.process(&mut col);
            for r in 0..h {
                grid[r * w + c] = col[r];
            }
        }
        let mut counts = vec![0usize; n_rings];
        let mut sums = vec![0.0; n_rings];
        for r in 0..h {
            for c in 0..w {
                let ring = ring_index(r, c, h, w);
                // power normalized so the rings sum to sum(x^2) (Parseval)
                let p = grid[r * w + c].norm_sqr() / (h * w) as f64;
                sums[ring] += p;
                counts[ring] += 1;
            }
        }
        for ring in 0..n_rings {
            ring_sum[ring] += sums[ring];
            if counts[ring] > 0 {
                ring_mean_sum[ring] += sums[ring] / counts[ring] as f64;
            }
            ring_count[ring] = counts[ring];
        }
    }
    let k = images.len() as f64;
    let ring_power: Vec<f64> = ring_sum.iter().map(|v| v / k).collect();
    let mean_log_power: Vec<f64> = ring_mean_sum
        .iter()
        .zip(&ring_count)
        .map(|(&v, &c)| if c == 0 { f64::NEG_INFINITY } else { (v / k).max(1e-300).log10() })
        .collect();
    Ok(PsdCurve { mean_log_power, ring_power, samples: images.len() })
}

fn ring_index(r: usize, c: usize, h: usize, w: usize) -> usize {
    let fu = r.min(h - r) as f64;
    let fv = c.min(w - c) as f64;
    (fu * fu + fv * fv).sqrt().floor() as usize
}

/// Analytic per-step cost model.
#[derive(Debug, Clone)]
pub struct CostModel {
    /// (relative cost, participates in reuse) per block.
    pub per_block: Vec<(f64, bool)>,
    pub n_steps: usize,
    /// Treat iterations whose mixing weight is exactly 0 as free
    /// (the network evaluation is skipped entirely).
    pub count_skipped_steps_free: bool,
}

impl CostModel {
    /// Single aggregate block: fraction `s` of the per-step cost is
    /// skippable.
    pub fn aggregate(n_steps: usize, skippable_fraction: f64) -> Result<CostModel> {
        if !(0.0..=1.0).contains(&skippable_fraction) {
            return Err(Error::config("skippable fraction must lie in [0, 1]"));
        }
        Ok(CostModel {
            per_block: vec![
                (skippable_fraction, true),
                (1.0 - skippable_fraction, false),
            ],
            n_steps,
            count_skipped_steps_free: false,
        })
    }

    fn full_step(&self) -> f64 {
        self.per_block.iter().map(|(c, _)| c).sum()
    }

    fn reuse_step(&self) -> f64 {
        self.per_block.iter().filter(|(_, sk)| !sk).map(|(c, _)| c).sum()
    }

    /// Predicted wall-clock speedup of reuse under `keyframes` (and
    /// optionally a mixing schedule, when zero-weight steps cost nothing)
    /// relative to evaluating every step in full.
    pub fn speedup(&self, keyframes: &KeyframeSet, mixing: Option<&MixingSchedule>) -> Result<f64> {
        if keyframes.n() != self.n_steps {
            return Err(Error::config("keyframe set and cost model disagree on step count"));
        }
        let full = self.full_step();
        if full <= 0.0 {
            return Err(Error::config("cost model has no positive block costs"));
        }
        let mut total = 0.0;
        for iter in 1..=self.n_steps {
            if keyframes.contains(iter) {
                total += full;
            } else if self.count_skipped_steps_free
                && mixing.map(|m| m.lambda(iter) == 0.0).unwrap_or(false)
            {
                // skipped entirely
            } else {
                total += self.reuse_step();
            }
        }
        if total <= 0.0 {
            return Err(Error::config("cost model predicts zero total cost"));
        }
        Ok(self.n_steps as f64 * full / total)
    }
}

/// Maximum absolute deviation between a reduced-step baseline run and a
/// reuse run whose stored score is always used between keyframes. On nested
/// time grids the two are the same computation.
pub struct EquivalenceReport {
    pub max_abs_dev: f64,
    /// True when the stride does not divide the step count evenly, so the
    /// two runs take different time grids and are not expected to agree.
    pub uneven_windows: bool,
    pub reduced_steps: usize,
    pub full_steps: usize,
}

pub fn verify_nfe_equivalence(
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    n_steps: usize,
    stride: usize,
    seed: u64,
) -> Result<EquivalenceReport> {
    if stride == 0 || n_steps == 0 {
        return Err(Error::config("equivalence check requires n_steps >= 1 and stride >= 1"));
    }
    let uneven_windows = n_steps % stride != 0;
    let keyframes = KeyframeSet::uniform(n_steps, stride)?;
    let mixing = MixingSchedule::always_reuse(n_steps);
    let cfg = SamplerConfig::new(n_steps, seed);
    let fr = reuse::frdiff_sample(net, &cfg, &keyframes, mixing, schedule, ReuseScope::All)?;

    // Reduced run over exactly the keyframe start times.
    let times = schedule.ddim_times(n_steps)?;
    let mut reduced_times: Vec<usize> = keyframes.iter().map(|k| times[k - 1]).collect();
    reduced_times.push(0);
    let reduced_steps = reduced_times.len() - 1;
    let mut rcfg = SamplerConfig::new(reduced_steps, seed);
    rcfg.times = Some(reduced_times);
    let reduced = sampler::sample(net, &rcfg, schedule, &mut sampler::NoHooks)?;

    let max_abs_dev = fr.final_sample().max_abs_diff(reduced.final_sample());
    Ok(EquivalenceReport { max_abs_dev, uneven_windows, reduced_steps, full_steps: n_steps })
}
