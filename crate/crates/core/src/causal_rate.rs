//! Sequential rate allocation driven by a power-allocation policy.
//!
//! The remaining rate requirement is converted into an equivalent power budget
//! by spreading it evenly over the remaining blocks at the mean main-channel
//! SNR. A power policy then picks the block's power on that synthetic state,
//! and the achieved rate is subtracted from the requirement. The last block
//! takes whatever rate is still missing, if the constraints allow it.

use serde::{Deserialize, Serialize};

use crate::causal_mdp::{feasible_actions, margin_bound, margin_gain, ActionGrid, MdpState};
use crate::channel::BlockSnrs;
use crate::noncausal_rate::{delta_rate, RateAllocation};
use crate::outcome::{AllocationOutcome, Status};
use crate::qlearn::{masked_argmax, q_forward, QNetwork};

/// Bookkeeping carried between blocks of a rate rollout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateRolloutState {
    /// Rate still missing, in nats. Negative once the requirement is exceeded.
    pub r_rem: f64,
    pub margin: f64,
    /// One-based block index.
    pub block_index: usize,
}

/// Power needed to deliver `r_rem` nats evenly over the blocks `block..=blocks`
/// at SNR `mean_h`: `(n / mean_h) (e^{r_rem / n} - 1)` with `n` the number of
/// remaining blocks. Negative requirements count as zero.
pub fn rate_to_power_budget(r_rem: f64, block: usize, blocks: usize, mean_h: f64) -> f64 {
    let remaining = (blocks + 1 - block) as f64;
    remaining / mean_h * (r_rem.max(0.0) / remaining).exp_m1()
}

/// Rollout with an arbitrary power rule. `policy` receives the synthetic
/// state and the number of feasible grid levels and returns a grid index.
pub fn rate_rollout_with<F>(
    snrs: &BlockSnrs,
    r0: f64,
    eps: f64,
    grid: &ActionGrid,
    mean_h: f64,
    mut policy: F,
) -> AllocationOutcome<RateAllocation>
where
    F: FnMut(&MdpState, usize) -> usize,
{
    let blocks = snrs.len();
    let mut rates = Vec::with_capacity(blocks);
    let mut st = RateRolloutState {
        r_rem: r0,
        margin: 0.0,
        block_index: 1,
    };
    for l in 0..blocks - 1 {
        let (h, g) = (snrs.h[l], snrs.g[l]);
        let budget = rate_to_power_budget(st.r_rem, st.block_index, blocks, mean_h);
        let state = MdpState {
            p_rem: budget,
            margin: st.margin,
            h,
            g,
            block_index: st.block_index,
        };
        let count = feasible_actions(&state, eps, grid);
        let action = policy(&state, count);
        assert!(
            action < count,
            "policy chose infeasible action {action} of {count}"
        );
        let p = grid.value(action);
        let r = (h * p).ln_1p();
        rates.push(r);
        st.r_rem -= r;
        st.margin += margin_gain(p, h, g);
        st.block_index += 1;
    }

    let (h, g) = (snrs.h[blocks - 1], snrs.g[blocks - 1]);
    let last = if st.r_rem <= 0.0 {
        0.0
    } else {
        let cap = (eps / g).min(margin_bound(st.margin, h, g));
        if (h * cap).ln_1p() < st.r_rem {
            rates.push(0.0);
            return AllocationOutcome {
                margin: delta_rate(&rates, snrs),
                allocation: RateAllocation(rates),
                status: Status::DeclaredInfeasible,
                objective: f64::NAN,
                iterations: 0,
            };
        }
        st.r_rem
    };
    rates.push(last);
    let objective = rates.iter().zip(&snrs.h).map(|(r, h)| r.exp_m1() / h).sum();
    AllocationOutcome {
        margin: delta_rate(&rates, snrs),
        allocation: RateAllocation(rates),
        status: Status::Sequential,
        objective,
        iterations: 0,
    }
}

/// Rate rollout that picks powers with the greedy action of `net`.
pub fn causal_rate_rollout(
    net: &QNetwork,
    snrs: &BlockSnrs,
    r0: f64,
    eps: f64,
    grid: &ActionGrid,
    mean_h: f64,
) -> AllocationOutcome<RateAllocation> {
    rate_rollout_with(snrs, r0, eps, grid, mean_h, |s, count| {
        masked_argmax(&q_forward(net, s), count)
    })
}
