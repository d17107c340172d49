//! TOML run configuration shared by the CLI commands.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::Arch;
use crate::sampler::Solver;
use crate::reuse::ReuseScope;
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub sampler: SamplerSection,
    pub fr: FrSection,
    pub autofr: AutoFrSection,
    pub io: IoSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            sampler: SamplerSection::default(),
            fr: FrSection::default(),
            autofr: AutoFrSection::default(),
            io: IoSection::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub arch: Arch,
    pub width: usize,
    pub depth: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { arch: Arch::ToyUnet, width: 8, depth: 4, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { t_max: 1000, beta_start: 1e-4, beta_end: 2e-2 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSection {
    pub n_steps: usize,
    pub solver: Solver,
    pub guidance_weight: f64,
    pub seed: u64,
    pub cond: Option<usize>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        SamplerSection { n_steps: 50, solver: Solver::Ddim, guidance_weight: 0.0, seed: 0, cond: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrSection {
    /// Uniform keyframe interval; ignored when explicit keyframes are given.
    pub interval: usize,
    /// Explicit keyframe iterations (1-based).
    pub keyframes: Option<Vec<usize>>,
    pub tau: f64,
    pub bias: f64,
    pub scope: ReuseScope,
}

impl Default for FrSection {
    fn default() -> Self {
        FrSection { interval: 2, keyframes: None, tau: 30.0, bias: 0.5, scope: ReuseScope::All }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoFrSection {
    pub cost_balance: f64,
    pub lr: f64,
    pub iters: usize,
    pub batch: usize,
}

impl Default for AutoFrSection {
    fn default() -> Self {
        AutoFrSection { cost_balance: 1e-3, lr: 5e-2, iters: 60, batch: 4 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: Option<String>,
    pub checkpoint: Option<String>,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection { out_dir: None, checkpoint: None }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }
}
