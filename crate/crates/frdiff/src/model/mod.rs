//! Score networks built from residual blocks with an explicit S/f split.

mod blocks;
mod network;

pub use blocks::{BlockKind, DitBlock, ResidualBlock, ResnetBlock, SpatialTransformerBlock};
pub use network::{Arch, NetworkConfig, ScoreNetwork};

use crate::tensor::Tensor;
use crate::Result;

/// Per-evaluation operation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepCost {
    pub network_evals: usize,
    pub s_ops_executed: usize,
    pub s_ops_skipped: usize,
}

impl StepCost {
    pub fn add(&mut self, other: &StepCost) {
        self.network_evals += other.network_evals;
        self.s_ops_executed += other.s_ops_executed;
        self.s_ops_skipped += other.s_ops_skipped;
    }
}

/// Intercepts each residual block's S(.) computation during a network
/// forward pass. `fresh` computes S from the current input; a policy may
/// call it (and account an executed S-op) or substitute a cached value
/// (and account a skipped one).
pub trait BlockPolicy {
    fn s_value(
        &mut self,
        layer: usize,
        fresh: &mut dyn FnMut() -> Result<Tensor>,
        cost: &mut StepCost,
    ) -> Result<Tensor>;

    /// Observes the residual-branch output F_i = f_i(S_i(x), t) of each block.
    fn observe_block(&mut self, _layer: usize, _f_branch: &Tensor) {}
}

/// Always recomputes S. The baseline policy.
pub struct FreshPolicy;

impl BlockPolicy for FreshPolicy {
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
