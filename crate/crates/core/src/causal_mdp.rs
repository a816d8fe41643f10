//! Block-by-block power allocation as a Markov decision process.
//!
//! The transmitter only sees the current block's SNRs. The state carries the
//! remaining power budget and the accumulated less-noisy margin, and an action
//! is a power level from a uniform grid. Every constraint is an upper bound on
//! the power, so the feasible actions always form a prefix of the grid that
//! starts at zero.

use serde::{Deserialize, Serialize};

use crate::channel::BlockSnrs;
use crate::error::{config, Result};
use crate::noncausal_power::PowerAllocation;

/// Number of power levels used by default, zero included.
pub const DEFAULT_ACTION_LEVELS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpState {
    /// Remaining power budget.
    pub p_rem: f64,
    /// Accumulated less-noisy margin in nats.
    pub margin: f64,
    pub h: f64,
    pub g: f64,
    /// One-based block index.
    pub block_index: usize,
}

/// Uniform power levels `0, step, 2 step, ...`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActionGrid {
    pub step: f64,
    pub levels: usize,
}

impl ActionGrid {
    /// `levels` values spanning `[0, p0]`.
    pub fn spanning(p0: f64, levels: usize) -> Result<Self> {
        if levels < 2 {
            return config("an action grid needs at least two levels");
        }
        if !(p0.is_finite() && p0 > 0.0) {
            return config(format!(
                "action grid span must be positive and finite, got {p0}"
            ));
        }
        Ok(Self {
            step: p0 / (levels - 1) as f64,
            levels,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 || !(self.step.is_finite() && self.step > 0.0) {
            return config(format!("invalid action grid {self:?}"));
        }
        Ok(())
    }

    pub fn value(&self, index: usize) -> f64 {
        index as f64 * self.step
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.levels).map(|i| self.value(i))
    }
}

/// One transition as stored in the replay buffer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub block_index: usize,
    pub state: MdpState,
    /// Index into the action grid.
    pub action: usize,
    /// For the last block this is a sentinel with zero SNRs; it is never
    /// bootstrapped from.
    pub next_state: MdpState,
    pub reward: f64,
    pub terminal: bool,
}

pub fn init_state(p0: f64, h: f64, g: f64) -> MdpState {
    MdpState {
        p_rem: p0,
        margin: 0.0,
        h,
        g,
        block_index: 1,
    }
}

/// Largest power that keeps the margin nonnegative after this block, or
/// infinity when the block does not eat into the margin.
pub fn margin_bound(margin: f64, h: f64, g: f64) -> f64 {
    let shrink = (-margin).exp();
    if shrink * g > h {
        -(-margin).exp_m1() / (shrink * g - h)
    } else {
        f64::INFINITY
    }
}

/// Whether the single power level `p` is allowed in state `s`.
pub fn is_feasible_action(s: &MdpState, eps: f64, p: f64) -> bool {
    p <= s.p_rem && s.g * p <= eps && p <= margin_bound(s.margin, s.h, s.g)
}

/// Number of feasible grid levels; the feasible actions are the indices
/// `0..count`. Zero is always feasible, so the count is at least one.
pub fn feasible_actions(s: &MdpState, eps: f64, grid: &ActionGrid) -> usize {
    let cap = margin_bound(s.margin, s.h, s.g);
    let mut count = 1;
    while count < grid.levels {
        let p = grid.value(count);
        if p > s.p_rem || s.g * p > eps || p > cap {
            break;
        }
        count += 1;
    }
    count
}

/// Per-block margin contribution `ln((1 + h p) / (1 + g p))`.
pub fn margin_gain(p: f64, h: f64, g: f64) -> f64 {
    (h * p).ln_1p() - (g * p).ln_1p()
}

/// Applies power `p` in state `s` and moves to a block with SNRs
/// `(next_h, next_g)`. Returns the next state and the reward `ln(1 + h p)`.
pub fn step(s: &MdpState, p: f64, next_h: f64, next_g: f64) -> (MdpState, f64) {
    let reward = (s.h * p).ln_1p();
    let next = MdpState {
        p_rem: s.p_rem - p,
        margin: s.margin + margin_gain(p, s.h, s.g),
        h: next_h,
        g: next_g,
        block_index: s.block_index + 1,
    };
    (next, reward)
}

/// Result of one causal power rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub allocation: PowerAllocation,
    pub sum_rate: f64,
    pub experiences: Vec<Experience>,
}

/// Runs one episode over `snrs`, asking `policy` for a grid index given the
/// state and the number of feasible levels. Indices outside the feasible
/// prefix are a policy bug and panic.
pub fn rollout<F>(
    snrs: &BlockSnrs,
    p0: f64,
    eps: f64,
    grid: &ActionGrid,
    mut policy: F,
) -> Trajectory
where
    F: FnMut(&MdpState, usize) -> usize,
{
    let blocks = snrs.len();
    let mut powers = Vec::with_capacity(blocks);
    let mut experiences = Vec::with_capacity(blocks);
    let mut sum_rate = 0.0;
    let mut state = init_state(p0, snrs.h[0], snrs.g[0]);
    for l in 0..blocks {
        let count = feasible_actions(&state, eps, grid);
        let action = policy(&state, count);
        assert!(
            action < count,
            "policy chose infeasible action {action} of {count}"
        );
        let p = grid.value(action);
        let terminal = l + 1 == blocks;
        let (next_h, next_g) = if terminal {
            (0.0, 0.0)
        } else {
            (snrs.h[l + 1], snrs.g[l + 1])
        };
        let (next, reward) = step(&state, p, next_h, next_g);
        experiences.push(Experience {
            block_index: state.block_index,
            state,
            action,
            next_state: next,
            reward,
            terminal,
        });
        powers.push(p);
        sum_rate += reward;
        state = next;
    }
    Trajectory {
        allocation: PowerAllocation(powers),
        sum_rate,
        experiences,
    }
}
