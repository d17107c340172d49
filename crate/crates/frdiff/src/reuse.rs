//! Feature reuse: keyframe schedules, score mixing, and the sampler hooks
//! that cache per-layer features across iterations.

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::{BlockKind, ScoreNetwork, StepCost};
use crate::sampler::{self, SampleHooks, SamplerConfig, ScorePair, StepPlan, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Set of sampling iterations (1-based, over 1..=N) where every cached
/// feature is refreshed. Iteration 1 is always a keyframe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyframeSet {
    members: BTreeSet<usize>,
    n: usize,
}

impl KeyframeSet {
    /// Uniform schedule with interval `m`: {1, 1+m, 1+2m, ...} within 1..=n.
    pub fn uniform(n: usize, m: usize) -> Result<KeyframeSet> {
        if n == 0 || m == 0 {
            return Err(Error::config("keyframe schedule requires n >= 1 and interval >= 1"));
        }
        let members = (1..=n).step_by(m).collect();
        Ok(KeyframeSet { members, n })
    }

    /// Explicit membership. Iteration 1 is inserted if missing; members
    /// outside 1..=n are rejected.
    pub fn from_members(n: usize, members: impl IntoIterator<Item = usize>) -> Result<KeyframeSet> {
        if n == 0 {
            return Err(Error::config("keyframe schedule requires n >= 1"));
        }
        let mut set: BTreeSet<usize> = members.into_iter().collect();
        if set.iter().any(|&k| k == 0 || k > n) {
            return Err(Error::config("keyframe iterations must lie in 1..=n"));
        }
        set.insert(1);
        Ok(KeyframeSet { members: set, n })
    }

    pub fn contains(&self, iter: usize) -> bool {
        self.members.contains(&iter)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        false // iteration 1 is always present
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.members.iter().copied()
    }
}

/// Mixing weight lambda(t) between the reused score and the last fresh
/// score: a hard sigmoid over the normalized iteration index, 0 early
/// (noisy end), 1 late (clean end).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MixingSchedule {
    pub tau: f64,
    pub bias: f64,
    pub n: usize,
}

impl MixingSchedule {
    pub fn new(n: usize) -> MixingSchedule {
        MixingSchedule { tau: 30.0, bias: 0.5, n }
    }

    /// lambda identically 0: every non-keyframe reuses the stored score.
    pub fn always_reuse(n: usize) -> MixingSchedule {
        MixingSchedule { tau: 30.0, bias: f64::INFINITY, n }
    }

    /// lambda identically 1: non-keyframes always evaluate the network.
    pub fn never_reuse(n: usize) -> MixingSchedule {
        MixingSchedule { tau: 30.0, bias: f64::NEG_INFINITY, n }
    }

    pub fn lambda(&self, iter: usize) -> f64 {
        if self.bias.is_infinite() {
            return if self.bias > 0.0 { 0.0 } else { 1.0 };
        }
        let u = iter as f64 / self.n as f64;
        let v = (self.tau * (u - self.bias) + 2.0) / 4.0;
        v.clamp(0.0, 1.0)
    }
}

/// lambda * fresh + (1 - lambda) * stored. `fresh` may be None only when
/// lambda is exactly 0.
pub fn mixed_score(
    fresh: Option<&Tensor>,
    stored: &Tensor,
    lambda: f64,
) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::contract("mixing weight must lie in [0, 1]"));
    }
    match fresh {
        None if lambda == 0.0 => Ok(stored.clone()),
        None => Err(Error::contract("fresh score required when mixing weight is positive")),
        Some(f) => {
            if lambda == 1.0 {
                return Ok(f.clone());
            }
            f.mul_scalar(lambda).add(&stored.mul_scalar(1.0 - lambda))
        }
    }
}

/// Which block families participate in reuse; the rest always recompute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReuseScope {
    All,
    ResnetOnly,
    TransformerOnly,
}

impl ReuseScope {
    fn applies(&self, kind: BlockKind) -> bool {
        match self {
            ReuseScope::All => true,
            ReuseScope::ResnetOnly => !kind.is_transformer(),
            ReuseScope::TransformerOnly => kind.is_transformer(),
        }
    }
}

/// Cached per-layer features M_i and the last fresh score E, keyed by
/// evaluation pass so the conditional and unconditional branches under
/// guidance never share state.
#[derive(Default)]
struct ReuseCache {
    features: HashMap<(usize, usize), Tensor>,
    score: Option<ScorePair>,
    last_keyframe: Option<usize>,
}

/// Sampler hooks implementing per-layer feature reuse with score mixing.
pub struct FrHooks<'a> {
    keyframes: &'a KeyframeSet,
    mixing: MixingSchedule,
    scope: ReuseScope,
    kinds: Vec<BlockKind>,
    cache: ReuseCache,
    pass: usize,
    current_plan: StepPlan,
}

impl<'a> FrHooks<'a> {
    pub fn new(
        net: &ScoreNetwork,
        keyframes: &'a KeyframeSet,
        mixing: MixingSchedule,
        scope: ReuseScope,
    ) -> Result<FrHooks<'a>> {
        if mixing.n != keyframes.n() {
            return Err(Error::config("mixing schedule and keyframe set disagree on step count"));
        }
        Ok(FrHooks {
            keyframes,
            mixing,
            scope,
            kinds: net.block_kinds(),
            cache: ReuseCache::default(),
            pass: 0,
            current_plan: StepPlan::Fresh,
        })
    }
}

impl crate::model::BlockPolicy for FrHooks<'_> {
    fn s_value(
        &mut self,
        layer: usize,
        fresh: &mut dyn FnMut() -> Result<Tensor>,
        cost: &mut StepCost,
    ) -> Result<Tensor> {
        let reusable = self.scope.applies(self.kinds[layer]);
        let key = (layer, self.pass);
        match self.current_plan {
            StepPlan::Reuse if reusable => {
                if let Some(v) = self.cache.features.get(&key) {
                    cost.s_ops_skipped += 1;
                    return Ok(v.clone());
                }
                Err(Error::contract(format!(
                    "no cached feature for layer {layer} pass {} before a keyframe",
                    self.pass
                )))
            }
            _ => {
                cost.s_ops_executed += 1;
                let v = fresh()?;
                if reusable {
                    self.cache.features.insert(key, v.detached());
                }
                Ok(v)
            }
        }
    }
}

impl SampleHooks for FrHooks<'_> {
    fn plan(&mut self, iter: usize) -> StepPlan {
        if self.keyframes.contains(iter) {
            StepPlan::Fresh
        } else if self.mixing.lambda(iter) > 0.0 {
            StepPlan::Reuse
        } else {
            StepPlan::Skip
        }
    }

    fn begin_iter(&mut self, iter: usize, plan: StepPlan) {
        self.current_plan = plan;
        if plan == StepPlan::Fresh {
            self.cache.last_keyframe = Some(iter);
        }
    }

    fn begin_eval(&mut self, pass: usize) {
        self.pass = pass;
    }

    fn lambda(&self, iter: usize) -> f64 {
        if self.keyframes.contains(iter) {
            1.0
        } else {
            self.mixing.lambda(iter)
        }
    }

    fn score(&mut self, iter: usize, plan: StepPlan, fresh: Option<ScorePair>) -> Result<ScorePair> {
        match plan {
            StepPlan::Fresh => {
                let pair = fresh.ok_or_else(|| Error::contract("keyframe step missing fresh score"))?;
                self.cache.score = Some((pair.0.detached(), pair.1.as_ref().map(|u| u.detached())));
                Ok(pair)
            }
            StepPlan::Reuse => {
                let lambda = self.mixing.lambda(iter);
                let (fc, fu) = fresh.ok_or_else(|| Error::contract("reuse step missing fresh score"))?;
                let (sc, su) = self
                    .cache
                    .score
                    .as_ref()
                    .ok_or_else(|| Error::contract("no stored score before a keyframe"))?;
                let mixed_c = mixed_score(Some(&fc), sc, lambda)?;
                let mixed_u = match (&fu, su) {
                    (Some(f), Some(s)) => Some(mixed_score(Some(f), s, lambda)?),
                    (None, None) => None,
                    _ => return Err(Error::contract("guidance branches diverged across iterations")),
                };
                Ok((mixed_c, mixed_u))
            }
            StepPlan::Skip => {
                let (sc, su) = self
                    .cache
                    .score
                    .as_ref()
                    .ok_or_else(|| Error::contract("no stored score before a keyframe"))?;
                Ok((sc.clone(), su.clone()))
            }
        }
    }
}

/// Sample with feature reuse under the given keyframe and mixing schedules.
pub fn frdiff_sample(
    net: &ScoreNetwork,
    config: &SamplerConfig,
    keyframes: &KeyframeSet,
    mixing: MixingSchedule,
    schedule: &NoiseSchedule,
    scope: ReuseScope,
) -> Result<Trajectory> {
    if keyframes.n() != config.n_steps {
        return Err(Error::config("keyframe set and sampler disagree on step count"));
    }
    let mut hooks = FrHooks::new(net, keyframes, mixing, scope)?;
    sampler::sample(net, config, schedule, &mut hooks)
}
