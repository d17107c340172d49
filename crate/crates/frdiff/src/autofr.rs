//! Gradient-based search over keyframe schedules.
//!
//! Each sampling iteration gets a learnable gate. The gate's hard value
//! (0 or 1) selects between refreshing and reusing the cached features and
//! stored score; a straight-through estimator lets the fidelity loss of the
//! full sampling trajectory back-propagate into the gate logits.

use crate::model::{BlockPolicy, ScoreNetwork, StepCost};
use crate::reuse::{KeyframeSet, MixingSchedule};
use crate::sampler::{self, NoHooks, SampleHooks, SamplerConfig, ScorePair, StepPlan};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::train::Adam;
use crate::{Error, Result};

/// Logit used for the pinned-open first iteration.
pub const PINNED_LOGIT: f64 = 6.0;
/// Initial logit for the free gates (sigmoid ~= 0.62, all open).
pub const INIT_LOGIT: f64 = 0.5;

/// Fresh gate logits for an n-step schedule. Index i corresponds to
/// sampling iteration i+1; iteration 1 is pinned open.
pub fn init_theta(n: usize) -> Tensor {
    let mut v = vec![INIT_LOGIT; n];
    v[0] = PINNED_LOGIT;
    Tensor::from_vec(vec![n], v)
}

/// Hard gates with straight-through gradients: forward round(sigmoid(theta)),
/// backward d sigmoid. Gate 0 (iteration 1) is a constant 1.
pub fn ste_gates(theta: &Tensor) -> Result<Vec<Tensor>> {
    let n = theta.len();
    let mut gates = Vec::with_capacity(n);
    gates.push(Tensor::scalar(1.0));
    for i in 1..n {
        gates.push(theta.index(i)?.sigmoid().round_ste());
    }
    Ok(gates)
}

/// Smoothed gates for finite-difference checks of the straight-through
/// estimator: round(sigmoid(base_i)) + sigmoid(theta_i) - sigmoid(base_i),
/// with the rounding frozen at `base`. Returns untracked constants.
pub fn relaxed_gates(theta: &[f64], base: &[f64]) -> Vec<Tensor> {
    let mut gates = Vec::with_capacity(theta.len());
    gates.push(Tensor::scalar(1.0));
    for i in 1..theta.len() {
        let sb = sigmoid(base[i]);
        let hard = if sb >= 0.5 { 1.0 } else { 0.0 };
        gates.push(Tensor::scalar(hard + sigmoid(theta[i]) - sb));
    }
    gates
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Differentiable schedule-cost penalty: sum_t relu(sigmoid(theta_t) - 1/2).
/// Zero exactly when every gate is closed.
pub fn cost_loss(theta: &Tensor) -> Result<Tensor> {
    Ok(theta.sigmoid().add_scalar(-0.5).relu().sum())
}

/// Sampler hooks that run every iteration through the network but blend
/// cached features and the stored score through per-iteration gates.
pub struct GatedHooks {
    gates: Vec<Tensor>,
    mixing: MixingSchedule,
    features: Vec<Option<Tensor>>,
    score: Option<ScorePair>,
    gate_now: Tensor,
    pass: usize,
    n_layers: usize,
}

impl GatedHooks {
    pub fn new(net: &ScoreNetwork, gates: Vec<Tensor>, mixing: MixingSchedule) -> Result<GatedHooks> {
        if gates.len() != mixing.n {
            return Err(Error::config("gate count and mixing schedule disagree on step count"));
        }
        let n_layers = net.block_kinds().len();
        Ok(GatedHooks {
            gates,
            mixing,
            features: vec![None; n_layers * 2],
            score: None,
            gate_now: Tensor::scalar(1.0),
            pass: 0,
            n_layers,
        })
    }

    fn blend(&self, fresh: &Tensor, stored: Option<&Tensor>) -> Result<Tensor> {
        match stored {
            // gate * fresh + (1 - gate) * stored
            Some(m) => fresh
                .scale(&self.gate_now)?
                .add(&m.scale(&self.gate_now.rsub_scalar(1.0))?),
            // first iteration: the gate is pinned open, nothing to blend with
            None => Ok(fresh.clone()),
        }
    }
}

impl BlockPolicy for GatedHooks {
    fn s_value(
        &mut self,
        layer: usize,
        fresh: &mut dyn FnMut() -> Result<Tensor>,
        cost: &mut StepCost,
    ) -> Result<Tensor> {
        cost.s_ops_executed += 1;
        let slot = self.pass * self.n_layers + layer;
        let v = self.blend(&fresh()?, self.features[slot].as_ref())?;
        self.features[slot] = Some(v.clone());
        Ok(v)
    }
}

impl SampleHooks for GatedHooks {
    fn begin_iter(&mut self, iter: usize, _plan: StepPlan) {
        self.gate_now = self.gates[iter - 1].clone();
    }

    fn begin_eval(&mut self, pass: usize) {
        self.pass = pass;
    }

    fn lambda(&self, iter: usize) -> f64 {
        self.mixing.lambda(iter)
    }

    fn score(&mut self, iter: usize, _plan: StepPlan, fresh: Option<ScorePair>) -> Result<ScorePair> {
        let (fc, fu) = fresh.ok_or_else(|| Error::contract("gated sampling always evaluates"))?;
        // Update the stored score first, then mix: at an open gate the
        // stored score equals the fresh one and the mix is a no-op.
        let ec = self.blend(&fc, self.score.as_ref().map(|(c, _)| c))?;
        let eu = match (&fu, self.score.as_ref().and_then(|(_, u)| u.as_ref())) {
            (Some(f), s) => Some(self.blend(f, s)?),
            (None, _) => None,
        };
        self.score = Some((ec.clone(), eu.clone()));
        let lambda = self.mixing.lambda(iter);
        let out_c = fc.mul_scalar(lambda).add(&ec.mul_scalar(1.0 - lambda))?;
        let out_u = match (fu, eu) {
            (Some(f), Some(e)) => Some(f.mul_scalar(lambda).add(&e.mul_scalar(1.0 - lambda))?),
            _ => None,
        };
        Ok((out_c, out_u))
    }
}

#[derive(Debug, Clone)]
pub struct AutoFrConfig {
    /// Weight of the schedule-cost penalty against sample fidelity.
    pub cost_balance: f64,
    pub lr: f64,
    pub iters: usize,
    /// One reverse-process trajectory per seed; the fidelity loss averages
    /// over them.
    pub seeds: Vec<u64>,
    pub n_steps: usize,
    pub mixing: MixingSchedule,
}

impl AutoFrConfig {
    pub fn new(n_steps: usize, cost_balance: f64) -> AutoFrConfig {
        AutoFrConfig {
            cost_balance,
            lr: 5e-2,
            iters: 60,
            seeds: vec![11, 12, 13, 14],
            n_steps,
            mixing: MixingSchedule::new(n_steps),
        }
    }
}

pub struct AutoFrResult {
    pub theta: Vec<f64>,
    pub keyframes: KeyframeSet,
    pub loss_history: Vec<f64>,
    /// |K| after each search iteration.
    pub keyframe_counts: Vec<usize>,
    /// Reference final samples, one per seed.
    pub targets: Vec<Tensor>,
}

/// Search for a keyframe schedule by descending the fidelity-plus-cost loss
/// through the gates of the full sampling trajectory.
pub fn autofr_search(
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    config: &AutoFrConfig,
) -> Result<AutoFrResult> {
    if config.seeds.is_empty() {
        return Err(Error::config("schedule search needs at least one seed"));
    }
    let n = config.n_steps;
    // Ground-truth endpoints from the unmodified sampler, one per seed.
    let mut targets = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let cfg = SamplerConfig::new(n, seed);
        let traj = sampler::sample(net, &cfg, schedule, &mut NoHooks)?;
        targets.push(traj.final_sample().detached());
    }

    let mut theta = init_theta(n);
    let mut opt = Adam::new(config.lr);
    opt.beta1 = 0.9;
    opt.beta2 = 0.999;
    let mut loss_history = Vec::with_capacity(config.iters);
    let mut keyframe_counts = Vec::with_capacity(config.iters);
    for _ in 0..config.iters {
        let mut grad_acc = vec![0.0; n];
        let mut loss_acc = 0.0;
        for (si, &seed) in config.seeds.iter().enumerate() {
            let tape = Tape::new();
            let theta_t = tape.watch(&theta);
            let gates = ste_gates(&theta_t)?;
            let mut hooks = GatedHooks::new(net, gates, config.mixing)?;
            let cfg = SamplerConfig::new(n, seed);
            let traj = sampler::sample(net, &cfg, schedule, &mut hooks)?;
            let diff = traj.final_sample().sub(&targets[si])?;
            let fid = diff.mul(&diff)?.mean();
            let loss = fid.add(&cost_loss(&theta_t)?.mul_scalar(config.cost_balance))?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::numeric("schedule search loss diverged"));
            }
            loss_acc += loss_val;
            let grads = tape.backward(&loss)?;
            if let Some(g) = grads.wrt(&theta_t) {
                for (a, b) in grad_acc.iter_mut().zip(g.data().iter()) {
                    *a += b;
                }
            }
        }
        let k = config.seeds.len() as f64;
        for g in grad_acc.iter_mut() {
            *g /= k;
        }
        grad_acc[0] = 0.0; // iteration 1 stays a keyframe
        loss_history.push(loss_acc / k);
        let grad = Tensor::from_vec(vec![n], grad_acc);
        let bc = opt.begin_step();
        opt.update(0, &mut theta, Some(&grad), bc)?;
        keyframe_counts.push(theta.data().iter().filter(|&&v| v >= 0.0).count());
    }
    let members: Vec<usize> = theta
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= 0.0)
        .map(|(i, _)| i + 1)
        .collect();
    let keyframes = KeyframeSet::from_members(n, members)?;
    Ok(AutoFrResult {
        theta: theta.data().to_vec(),
        keyframes,
        loss_history,
        keyframe_counts,
        targets,
    })
}

/// Sample once with a fixed gate vector (hard 0/1 values), without
/// gradient tracking. Used to validate that gating reduces to plain
/// keyframe reuse when the stored score is always used (lambda = 0).
pub fn gated_sample(
    net: &ScoreNetwork,
    schedule: &NoiseSchedule,
    gate_values: &[f64],
    mixing: MixingSchedule,
    seed: u64,
) -> Result<crate::sampler::Trajectory> {
    let gates: Vec<Tensor> = gate_values.iter().map(|&g| Tensor::scalar(g)).collect();
    let mut hooks = GatedHooks::new(net, gates, mixing)?;
    let cfg = SamplerConfig::new(gate_values.len(), seed);
    sampler::sample(net, &cfg, schedule, &mut hooks)
}
