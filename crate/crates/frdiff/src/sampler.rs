//! DDIM/DDPM sampling with interception hooks.
//!
//! The hooks are the extension point the feature-reuse runtime attaches to:
//! a hook decides per iteration whether the network is evaluated fresh,
//! evaluated under per-layer reuse, or skipped entirely, and may rewrite the
//! score before the solver consumes it.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::normal_tensor;
use crate::model::{BlockPolicy, ScoreNetwork, StepCost};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ddim,
    Ddpm,
}

#[derive(Debug, Clone)]
pub struct SamplerConfig {
    /// Number of sampling iterations N. Iteration n runs 1..=N from noisiest
    /// to cleanest.
    pub n_steps: usize,
    pub solver: Solver,
    /// CFG weight w; the unconditional branch is evaluated only when a
    /// condition is present and w != 0.
    pub guidance_weight: f64,
    pub seed: u64,
    /// Optional class condition.
    pub cond: Option<usize>,
    /// Explicit diffusion-time subsequence (descending, ending at 0).
    /// Defaults to the uniform stride grid for n_steps.
    pub times: Option<Vec<usize>>,
}

impl SamplerConfig {
    pub fn new(n_steps: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            n_steps,
            solver: Solver::Ddim,
            guidance_weight: 0.0,
            seed,
            cond: None,
            times: None,
        }
    }

    pub fn with_cond(mut self, cond: usize, w: f64) -> SamplerConfig {
        self.cond = Some(cond);
        self.guidance_weight = w;
        self
    }
}

/// What to do at one sampling iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepPlan {
    /// Keyframe: evaluate the network, recomputing every S.
    Fresh,
    /// Evaluate the network with cached S values.
    Reuse,
    /// Skip the network evaluation entirely.
    Skip,
}

/// Conditional score and, under CFG, the unconditional score.
pub type ScorePair = (Tensor, Option<Tensor>);

pub trait SampleHooks: BlockPolicy {
    fn plan(&mut self, _iter: usize) -> StepPlan {
        StepPlan::Fresh
    }

    /// Called before the iteration's network evaluations.
    fn begin_iter(&mut self, _iter: usize, _plan: StepPlan) {}

    /// Called before each network evaluation within an iteration
    /// (pass 0 = conditional/main, pass 1 = unconditional).
    fn begin_eval(&mut self, _pass: usize) {}

    /// Rewrite the raw score(s) into the score the solver uses. `fresh` is
    /// None when the plan was Skip.
    fn score(&mut self, _iter: usize, _plan: StepPlan, fresh: Option<ScorePair>) -> Result<ScorePair> {
        fresh.ok_or_else(|| Error::contract("baseline hooks cannot skip evaluations"))
    }

    /// Mixing weight reported in the cost ledger.
    fn lambda(&self, _iter: usize) -> f64 {
        1.0
    }
}

/// Baseline hooks: every step evaluates the full network.
pub struct NoHooks;

impl BlockPolicy for NoHooks {
    fn s_value(
        &mut self,
        _layer: usize,
        fresh: &mut dyn FnMut() -> Result<Tensor>,
        cost: &mut StepCost,
    ) -> Result<Tensor> {
        cost.s_ops_executed += 1;
        fresh()
    }
}

impl SampleHooks for NoHooks {}

/// Baseline hooks that additionally record each block's residual-branch
/// output F_i per iteration (for the temporal-change metric).
pub struct RecordingHooks {
    pub features: Vec<Vec<Tensor>>,
}

impl RecordingHooks {
    pub fn new() -> Self {
        RecordingHooks { features: Vec::new() }
    }
}

impl Default for RecordingHooks {
    fn default() -> Self {
        Self::new()
    }
}

impl BlockPolicy for RecordingHooks {
    fn s_value(
        &mut self,
        _layer: usize,
        fresh: &mut dyn FnMut() -> Result<Tensor>,
        cost: &mut StepCost,
    ) -> Result<Tensor> {
        cost.s_ops_executed += 1;
        fresh()
    }

    fn observe_block(&mut self, _layer: usize, f_branch: &Tensor) {
        if let Some(step) = self.features.last_mut() {
            step.push(f_branch.detached());
        }
    }
}

impl SampleHooks for RecordingHooks {
    fn begin_iter(&mut self, _iter: usize, _plan: StepPlan) {
        self.features.push(Vec::new());
    }
}

/// Per-iteration entry of the cost ledger.
#[derive(Debug, Clone)]
pub struct StepRecord {
    pub iter: usize,
    pub t: usize,
    pub t_prev: usize,
    pub is_keyframe: bool,
    pub lambda: f64,
    pub cost: StepCost,
    pub wallclock_ms: f64,
}

pub struct Trajectory {
    /// x_N .. x_0: the initial noise followed by the state after each step.
    pub states: Vec<Tensor>,
    pub steps: Vec<StepRecord>,
    pub wallclock_ms: f64,
}

impl Trajectory {
    pub fn final_sample(&self) -> &Tensor {
        self.states.last().expect("trajectory has at least the initial state")
    }

    pub fn total_cost(&self) -> StepCost {
        let mut c = StepCost::default();
        for s in &self.steps {
            c.add(&s.cost);
        }
        c
    }

    /// Cost ledger rows: iteration, is_keyframe, lambda, network_evals,
    /// s_ops_executed, s_ops_skipped, wallclock_ms.
    pub fn ledger_rows(&self) -> Vec<Vec<String>> {
        self.steps
            .iter()
            .map(|s| {
                vec![
                    s.iter.to_string(),
                    (s.is_keyframe as u8).to_string(),
                    format!("{}", s.lambda),
                    s.cost.network_evals.to_string(),
                    s.cost.s_ops_executed.to_string(),
                    s.cost.s_ops_skipped.to_string(),
                    format!("{:.4}", s.wallclock_ms),
                ]
            })
            .collect()
    }
}

pub const LEDGER_HEADER: &str =
    "iteration,is_keyframe,lambda,network_evals,s_ops_executed,s_ops_skipped,wallclock_ms";

/// One deterministic DDIM update (eta = 0).
pub fn ddim_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::contract(format!("ddim_step requires t > t_prev, got {t} -> {t_prev}")));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let scale = (ab_p / ab_t).sqrt();
    // x_prev = sqrt(ab_p/ab_t) * (x - sqrt(1-ab_t)*eps) + sqrt(1-ab_p)*eps
    let eps_coeff = (1.0 - ab_p).sqrt() - scale * (1.0 - ab_t).sqrt();
    x_t.mul_scalar(scale).add(&eps.mul_scalar(eps_coeff))
}

/// Generalized ancestral (DDPM-style, eta = 1) update over an arbitrary time
/// subsequence. Kept as a stochastic reference solver.
pub fn ddpm_step(
    x_t: &Tensor,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
    schedule: &NoiseSchedule,
    noise: &Tensor,
) -> Result<Tensor> {
    if t_prev >= t {
        return Err(Error::contract(format!("ddpm_step requires t > t_prev, got {t} -> {t_prev}")));
    }
    let ab_t = schedule.alpha_bar(t);
    let ab_p = schedule.alpha_bar(t_prev);
    let sigma = ((1.0 - ab_p) / (1.0 - ab_t) * (1.0 - ab_t / ab_p)).sqrt();
    let x0_coeff = (ab_p / ab_t).sqrt();
    let dir_coeff = (1.0 - ab_p - sigma * sigma).max(0.0).sqrt()
        - x0_coeff * (1.0 - ab_t).sqrt();
    x_t.mul_scalar(x0_coeff)
        .add(&eps.mul_scalar(dir_coeff))?
        .add(&noise.mul_scalar(sigma))
}

/// Classifier-free guidance: (1+w) * cond - w * uncond.
pub fn cfg_combine(eps_cond: &Tensor, eps_uncond: &Tensor, w: f64) -> Result<Tensor> {
    eps_cond.mul_scalar(1.0 + w).sub(&eps_uncond.mul_scalar(w))
}

/// Run the sampler. Returns the full trajectory with per-step cost records.
pub fn sample(
    net: &ScoreNetwork,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
    hooks: &mut dyn SampleHooks,
) -> Result<Trajectory> {
    if config.n_steps == 0 {
        return Err(Error::config("n_steps must be >= 1"));
    }
    let times = match &config.times {
        Some(t) => {
            if t.len() != config.n_steps + 1 {
                return Err(Error::config("times must have n_steps + 1 entries"));
            }
            t.clone()
        }
        None => schedule.ddim_times(config.n_steps)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = normal_tensor(net.data_shape(), &mut rng);
    let use_cfg = config.cond.is_some() && config.guidance_weight != 0.0;

    let start = Instant::now();
    let mut states = Vec::with_capacity(config.n_steps + 1);
    states.push(x.clone());
    let mut steps = Vec::with_capacity(config.n_steps);
    for n in 1..=config.n_steps {
        let step_start = Instant::now();
        let plan = hooks.plan(n);
        hooks.begin_iter(n, plan);
        let mut cost = StepCost::default();
        let fresh = match plan {
            StepPlan::Skip => None,
            StepPlan::Fresh | StepPlan::Reuse => {
                hooks.begin_eval(0);
                let cond_eps = net.forward(&x, times[n - 1], config.cond, hooks.as_policy(), &mut cost)?;
                let uncond_eps = if use_cfg {
                    hooks.begin_eval(1);
                    Some(net.forward(&x, times[n - 1], None, hooks.as_policy(), &mut cost)?)
                } else {
                    None
                };
                Some((cond_eps, uncond_eps))
            }
        };
        let (eps_c, eps_u) = hooks.score(n, plan, fresh)?;
        let eps = match &eps_u {
            Some(u) => cfg_combine(&eps_c, u, config.guidance_weight)?,
            None => eps_c,
        };
        x = match config.solver {
            Solver::Ddim => ddim_step(&x, &eps, times[n - 1], times[n], schedule)?,
            Solver::Ddpm => {
                let z = if times[n] > 0 {
                    normal_tensor(net.data_shape(), &mut rng)
                } else {
                    Tensor::zeros(net.data_shape())
                };
                ddpm_step(&x, &eps, times[n - 1], times[n], schedule, &z)?
            }
        };
        states.push(x.clone());
        steps.push(StepRecord {
            iter: n,
            t: times[n - 1],
            t_prev: times[n],
            is_keyframe: plan == StepPlan::Fresh,
            lambda: hooks.lambda(n),
            cost,
            wallclock_ms: step_start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(Trajectory { states, steps, wallclock_ms: start.elapsed().as_secs_f64() * 1e3 })
}

// Object-safety helper: a &mut dyn SampleHooks needs re-borrowing as
// &mut dyn BlockPolicy for the network call.
trait AsPolicy {
    fn as_policy(&mut self) -> &mut dyn BlockPolicy;
}

impl AsPolicy for dyn SampleHooks + '_ {
    fn as_policy(&mut self) -> &mut dyn BlockPolicy {
        self
    }
}
