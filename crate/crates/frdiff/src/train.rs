//! Denoising score-matching training for the toy networks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{normal_tensor, Dataset};
use crate::model::{FreshPolicy, ScoreNetwork, StepCost};
use crate::schedule::NoiseSchedule;
use crate::tensor::{Tape, Tensor};
use crate::{Error, Result};

/// Adam with bias correction. Parameter order is fixed by the caller and
/// must be stable across steps.
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: usize,
}

impl Adam {
    pub fn new(lr: f64) -> Adam {
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    /// Start update step `t+1` and return the bias-correction factors.
    pub fn begin_step(&mut self) -> (f64, f64) {
        self.t += 1;
        (1.0 - self.beta1.powi(self.t as i32), 1.0 - self.beta2.powi(self.t as i32))
    }

    /// Update one parameter in place. `slot` must identify the same
    /// parameter across steps (visit order); a None gradient is a no-op.
    pub fn update(
        &mut self,
        slot: usize,
        param: &mut Tensor,
        grad: Option<&Tensor>,
        bc: (f64, f64),
    ) -> Result<()> {
        while self.m.len() <= slot {
            self.m.push(Vec::new());
            self.v.push(Vec::new());
        }
        let g = match grad {
            Some(g) => g.data(),
            None => return Ok(()),
        };
        if g.len() != param.len() {
            return Err(Error::contract("gradient shape mismatch in optimizer step"));
        }
        if self.m[slot].is_empty() {
            self.m[slot] = vec![0.0; param.len()];
            self.v[slot] = vec![0.0; param.len()];
        }
        let mut new_data = param.data().to_vec();
        for (j, val) in new_data.iter_mut().enumerate() {
            let gj = g[j];
            if !gj.is_finite() {
                return Err(Error::numeric("non-finite gradient in optimizer step"));
            }
            self.m[slot][j] = self.beta1 * self.m[slot][j] + (1.0 - self.beta1) * gj;
            self.v[slot][j] = self.beta2 * self.v[slot][j] + (1.0 - self.beta2) * gj * gj;
            let mh = self.m[slot][j] / bc.0;
            let vh = self.v[slot][j] / bc.1;
            *val -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        *param = Tensor::from_vec(param.shape().to_vec(), new_data);
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Probability of dropping the class label (trains the unconditional
    /// branch for guidance).
    pub cond_dropout: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { steps: 400, batch: 8, lr: 2e-3, seed: 7, cond_dropout: 0.15 }
    }
}

/// Train `net` to predict the added noise. Returns the per-step loss history.
pub fn train_toy(
    net: &mut ScoreNetwork,
    data: &Dataset,
    schedule: &NoiseSchedule,
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if data.items.is_empty() {
        return Err(Error::config("training dataset is empty"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut opt = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.steps);
    for _ in 0..config.steps {
        let tape = Tape::new();
        net.attach(&tape);
        let mut loss: Option<Tensor> = None;
        for _ in 0..config.batch {
            let (x0, class) = &data.items[rng.gen_range(0..data.items.len())];
            let t = rng.gen_range(1..=schedule.t_max());
            let ab = schedule.alpha_bar(t);
            let noise = normal_tensor(x0.shape(), &mut rng);
            let x_t = x0.mul_scalar(ab.sqrt()).add(&noise.mul_scalar((1.0 - ab).sqrt()))?;
            let cond = if rng.gen::<f64>() < config.cond_dropout { None } else { Some(*class) };
            let mut cost = StepCost::default();
            let pred = net.forward(&x_t, t, cond, &mut FreshPolicy, &mut cost)?;
            let diff = pred.sub(&noise)?;
            let term = diff.mul(&diff)?.mean();
            loss = Some(match loss {
                Some(l) => l.add(&term)?,
                None => term,
            });
        }
        let loss = loss.unwrap().mul_scalar(1.0 / config.batch as f64);
        let loss_val = loss.item();
        if !loss_val.is_finite() {
            return Err(Error::numeric("training loss diverged"));
        }
        history.push(loss_val);
        let grads = tape.backward(&loss)?;
        let bc = opt.begin_step();
        let mut slot = 0;
        let mut status = Ok(());
        net.visit_params_mut(&mut |_name, p| {
            if status.is_ok() {
                let g = grads.wrt(p);
                status = opt.update(slot, p, g.as_ref(), bc);
            }
            slot += 1;
        });
        status?;
        net.detach();
    }
    Ok(history)
}
