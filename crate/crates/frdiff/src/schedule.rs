//! Forward-process noise schedules.

use crate::{Error, Result};

/// Linear-beta noise schedule with cumulative-product alpha tables.
///
/// `alpha_bar(0) == 1` by convention; diffusion times run `1..=t_max`.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    t_max: usize,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_max == 0 {
            return Err(Error::config("schedule horizon must be positive"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::config(format!(
                "betas must satisfy 0 < start <= end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let mut betas = Vec::with_capacity(t_max);
        let mut alpha_bars = Vec::with_capacity(t_max + 1);
        alpha_bars.push(1.0);
        let mut prod = 1.0;
        for i in 0..t_max {
            let frac = if t_max == 1 { 0.0 } else { i as f64 / (t_max - 1) as f64 };
            let beta = beta_start + (beta_end - beta_start) * frac;
            betas.push(beta);
            prod *= 1.0 - beta;
            alpha_bars.push(prod);
        }
        Ok(NoiseSchedule { t_max, betas, alpha_bars })
    }

    /// Standard DDPM defaults: T=1000, beta from 1e-4 to 0.02.
    pub fn default_linear() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 0.02).expect("default schedule is valid")
    }

    pub fn t_max(&self) -> usize {
        self.t_max
    }

    /// beta_t for t in 1..=t_max.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.t_max).contains(&t), "beta index out of range");
        self.betas[t - 1]
    }

    /// alpha_t = 1 - beta_t.
    pub fn alpha(&self, t: usize) -> f64 {
        1.0 - self.beta(t)
    }

    /// Cumulative product up to t, for t in 0..=t_max.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.t_max, "alpha_bar index out of range");
        self.alpha_bars[t]
    }

    /// Uniform-stride DDIM time subsequence: `n+1` descending diffusion times
    /// from t_max to 0. Iteration i of sampling steps from `times[i-1]` to
    /// `times[i]`.
    pub fn ddim_times(&self, n: usize) -> Result<Vec<usize>> {
        if n == 0 || n > self.t_max {
            return Err(Error::config(format!(
                "step count must be in 1..={}, got {n}",
                self.t_max
            )));
        }
        let times: Vec<usize> = (0..=n)
            .map(|i| ((self.t_max * (n - i)) as f64 / n as f64).round() as usize)
            .collect();
        for w in times.windows(2) {
            if w[1] >= w[0] {
                return Err(Error::config("too many steps for the schedule horizon"));
            }
        }
        Ok(times)
    }
}
