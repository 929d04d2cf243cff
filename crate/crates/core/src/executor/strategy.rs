//! Block scaling policy for worker pools.
//!
//! Evaluated every poll interval: request one more block while the queue is
//! longer than the number of connected worker slots and the block limit
//! allows it; release running blocks that have been idle for the idle
//! timeout, never going below the minimum.

use std::time::Duration;

use crate::provider::{BlockId, BlockState};

#[derive(Clone, Debug, PartialEq)]
pub struct StrategyParams {
    pub poll_interval: Duration,
    pub idle_timeout: Duration,
}

impl Default for StrategyParams {
    fn default() -> Self {
        Self {
            poll_interval: Duration::from_secs(1),
            idle_timeout: Duration::from_secs(60),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockView {
    pub id: BlockId,
    pub state: BlockState,
    pub busy: bool,
    pub draining: bool,
    /// Clock time (seconds) since which the block has had no tasks.
    pub idle_since: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolView {
    pub queued: usize,
    pub active_workers: usize,
    pub min_blocks: usize,
    pub max_blocks: usize,
    pub blocks: Vec<BlockView>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScalingDecision {
    pub scale_out: usize,
    pub scale_in: Vec<BlockId>,
}

#[derive(Clone, Debug, Default)]
pub struct ScalingPolicy {
    pub params: StrategyParams,
}

impl ScalingPolicy {
    pub fn new(params: StrategyParams) -> Self {
        Self { params }
    }

    pub fn decide(&self, view: &PoolView, now: f64) -> ScalingDecision {
        let live: Vec<&BlockView> = view
            .blocks
            .iter()
            .filter(|b| !b.draining && b.state.is_active())
            .collect();
        let mut decision = ScalingDecision::default();

        if view.queued > view.active_workers && live.len() < view.max_blocks {
            decision.scale_out = 1;
            return decision;
        }
        if view.queued > 0 {
            return decision;
        }

        let idle_for = self.params.idle_timeout.as_secs_f64();
        let mut releasable = live.len().saturating_sub(view.min_blocks);
        let mut idle: Vec<&BlockView> = live
            .iter()
            .copied()
            .filter(|b| b.state == BlockState::Running && !b.busy && b.idle_since.is_some_and(|t| now - t >= idle_for))
            .collect();
        // Newest blocks go first.
        idle.sort_by_key(|b| std::cmp::Reverse(b.id));
        for b in idle {
            if releasable == 0 {
                break;
            }
            decision.scale_in.push(b.id);
            releasable -= 1;
        }
        decision
    }
}
