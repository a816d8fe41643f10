//! Reference allocators the proposed schemes are compared against.

use crate::causal_mdp::{rollout, ActionGrid, MdpState, Trajectory};
use crate::causal_rate::rate_rollout_with;
use crate::channel::BlockSnrs;
use crate::error::Result;
use crate::noncausal_power::{
    check_feasible, delta_power, kkt_power, sum_rate, trivial_power, PowerAllocation, PowerProblem,
};
use crate::noncausal_rate::{
    delta_rate, fallback_alpha, kkt_rate, screen_infeasible, total_power, RateAllocation,
    RateProblem,
};
use crate::numerics::BisectionSpec;
use crate::outcome::{AllocationOutcome, Status, MARGIN_SLACK};

/// Convex relaxation if it happens to meet the less-noisy constraint,
/// otherwise the scaled allocation on blocks with `h >= g`.
pub fn noncausal_power_convex_baseline(
    problem: &PowerProblem,
    tol: BisectionSpec,
) -> Result<AllocationOutcome<PowerAllocation>> {
    let snrs = &problem.snrs;
    if !check_feasible(snrs) {
        return Ok(AllocationOutcome {
            allocation: PowerAllocation::zeros(snrs.len()),
            status: Status::Infeasible,
            objective: 0.0,
            margin: 0.0,
            iterations: 0,
        });
    }
    let kkt = kkt_power(problem, tol)?;
    let margin = delta_power(&kkt.0, snrs);
    if margin >= -MARGIN_SLACK {
        return Ok(AllocationOutcome {
            objective: sum_rate(&kkt.0, snrs),
            allocation: kkt,
            status: Status::OptimalConvex,
            margin,
            iterations: 0,
        });
    }
    Ok(noncausal_power_trivial_baseline(problem))
}

/// Scaled allocation on blocks with `h >= g`, or zero power when there are none.
pub fn noncausal_power_trivial_baseline(
    problem: &PowerProblem,
) -> AllocationOutcome<PowerAllocation> {
    let snrs = &problem.snrs;
    if !check_feasible(snrs) {
        return AllocationOutcome {
            allocation: PowerAllocation::zeros(snrs.len()),
            status: Status::Infeasible,
            objective: 0.0,
            margin: 0.0,
            iterations: 0,
        };
    }
    let p = trivial_power(problem);
    AllocationOutcome {
        objective: sum_rate(&p.0, snrs),
        margin: delta_power(&p.0, snrs),
        allocation: p,
        status: Status::TrivialFallback,
        iterations: 0,
    }
}

/// The `(trivial, convex)` pair for the minimum-power problem.
///
/// The trivial baseline scales the per-block maximum rates on blocks with
/// `h >= g` to meet the requirement exactly. The convex baseline is the KKT
/// point when it meets the less-noisy constraint and the trivial baseline
/// otherwise.
pub fn noncausal_rate_baselines(
    problem: &RateProblem,
    tol: BisectionSpec,
    tol_alpha: BisectionSpec,
) -> Result<(
    AllocationOutcome<RateAllocation>,
    AllocationOutcome<RateAllocation>,
)> {
    let snrs = &problem.snrs;
    if screen_infeasible(problem) {
        let none = AllocationOutcome {
            allocation: RateAllocation::zeros(snrs.len()),
            status: Status::Infeasible,
            objective: f64::NAN,
            margin: 0.0,
            iterations: 0,
        };
        return Ok((none.clone(), none));
    }
    let trivial = fallback_alpha(problem, tol_alpha)?;
    let kkt = kkt_rate(problem, tol)?;
    let margin = delta_rate(&kkt.0, snrs);
    let convex = if margin >= -MARGIN_SLACK {
        AllocationOutcome {
            objective: total_power(&kkt.0, snrs),
            allocation: kkt,
            status: Status::OptimalConvex,
            margin,
            iterations: 0,
        }
    } else {
        trivial.clone()
    };
    Ok((trivial, convex))
}

/// Index of the power level that maximizes this block's rate plus the rate of
/// spreading the leftover budget evenly over the remaining blocks at SNR
/// `mean_h`. The last block takes the largest feasible level. Ties go to the
/// smaller power.
pub fn causal_average_power(
    s: &MdpState,
    blocks: usize,
    mean_h: f64,
    grid: &ActionGrid,
    feasible: usize,
) -> usize {
    if s.block_index >= blocks {
        return feasible - 1;
    }
    let rest = (blocks - s.block_index) as f64;
    let mut best = 0;
    let mut best_value = f64::NEG_INFINITY;
    for i in 0..feasible {
        let p = grid.value(i);
        let value = (p * s.h).ln_1p() + rest * ((s.p_rem - p).max(0.0) / rest * mean_h).ln_1p();
        if value > best_value {
            best = i;
            best_value = value;
        }
    }
    best
}

/// Zero on blocks with `h < g`; otherwise the largest level that fits the
/// covertness cap and the remaining budget.
pub fn causal_trivial_power(s: &MdpState, feasible: usize) -> usize {
    if s.h < s.g {
        0
    } else {
        // with h >= g the margin never binds, so the feasible prefix is
        // exactly the levels below min(eps / g, p_rem)
        feasible - 1
    }
}

pub fn causal_average_power_rollout(
    snrs: &BlockSnrs,
    p0: f64,
    eps: f64,
    grid: &ActionGrid,
    mean_h: f64,
) -> Trajectory {
    let blocks = snrs.len();
    rollout(snrs, p0, eps, grid, |s, count| {
        causal_average_power(s, blocks, mean_h, grid, count)
    })
}

pub fn causal_trivial_power_rollout(
    snrs: &BlockSnrs,
    p0: f64,
    eps: f64,
    grid: &ActionGrid,
) -> Trajectory {
    rollout(snrs, p0, eps, grid, |s, count| {
        causal_trivial_power(s, count)
    })
}

/// Rate rollout driven by [`causal_average_power`] on the converted budget.
pub fn causal_average_rate(
    snrs: &BlockSnrs,
    r0: f64,
    eps: f64,
    grid: &ActionGrid,
    mean_h: f64,
) -> AllocationOutcome<RateAllocation> {
    let blocks = snrs.len();
    rate_rollout_with(snrs, r0, eps, grid, mean_h, |s, count| {
        causal_average_power(s, blocks, mean_h, grid, count)
    })
}

/// Rate rollout driven by [`causal_trivial_power`] on the converted budget.
pub fn causal_trivial_rate(
    snrs: &BlockSnrs,
    r0: f64,
    eps: f64,
    grid: &ActionGrid,
    mean_h: f64,
) -> AllocationOutcome<RateAllocation> {
    rate_rollout_with(snrs, r0, eps, grid, mean_h, |s, count| {
        causal_trivial_power(s, count)
    })
}
