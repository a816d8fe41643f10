//! Transmit power minimization under a sum covert rate requirement, with the
//! whole channel known in advance.
//!
//! ```text
//! min  sum (e^{R_l} - 1) / h_l
//! s.t. sum R_l >= R0,  (e^{R_l} - 1) g_l / h_l <= eps,
//!      sum R_l >= sum ln(1 + (e^{R_l} - 1) g_l / h_l)
//! ```
//!
//! Mirrors the power solver: screen out provably infeasible instances, try
//! the convex relaxation, run a penalized projected gradient descent, and as
//! a last resort scale the closed-form allocation on blocks with `h >= g`
//! until it meets `R0` exactly.

use serde::{Deserialize, Serialize};

use crate::channel::BlockSnrs;
use crate::error::{config, Error, Result};
use crate::noncausal_power::check_feasible;
use crate::numerics::{
    bisect_monotone, blend_to_margin, penalty_schedule, project_rate_set, safeguarded_step,
    BisectionSpec, PenaltyParams, POCS_CYCLES,
};
use crate::outcome::{AllocationOutcome, Status, MARGIN_SLACK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateProblem {
    pub snrs: BlockSnrs,
    /// Required sum rate in nats.
    pub r0: f64,
    pub eps: f64,
}

impl RateProblem {
    pub fn new(snrs: BlockSnrs, r0: f64, eps: f64) -> Result<Self> {
        if !(r0 > 0.0 && r0.is_finite()) {
            return config("R0 must be positive and finite");
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return config("eps must be positive and finite");
        }
        Ok(Self { snrs, r0, eps })
    }

    /// Per-block rate caps `ln(1 + eps h_l / g_l)`.
    pub fn caps(&self) -> Vec<f64> {
        self.snrs
            .h
            .iter()
            .zip(&self.snrs.g)
            .map(|(h, g)| (self.eps * h / g).ln_1p())
            .collect()
    }
}

/// Per-block rates in nats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateAllocation(pub Vec<f64>);

impl RateAllocation {
    pub fn zeros(len: usize) -> Self {
        Self(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Power needed for the rates: `sum (e^{R_l} - 1) / h_l`.
pub fn total_power(r: &[f64], snrs: &BlockSnrs) -> f64 {
    r.iter().zip(&snrs.h).map(|(r, h)| r.exp_m1() / h).sum()
}

/// Per-block powers that realize the rates.
pub fn powers_for_rates(r: &[f64], snrs: &BlockSnrs) -> Vec<f64> {
    r.iter().zip(&snrs.h).map(|(r, h)| r.exp_m1() / h).collect()
}

/// True when the instance is certainly infeasible: no block has `h >= g`, or
/// even the per-block rate caps cannot reach `R0`.
pub fn screen_infeasible(problem: &RateProblem) -> bool {
    !check_feasible(&problem.snrs) || problem.caps().iter().sum::<f64>() < problem.r0
}

/// Rate water-filling at multiplier `lambda` with per-block caps.
pub fn rate_fill(lambda: f64, snrs: &BlockSnrs, caps: &[f64]) -> Vec<f64> {
    snrs.h
        .iter()
        .zip(caps)
        .map(|(h, c)| (lambda * h).ln().clamp(0.0, *c))
        .collect()
}

/// Optimum of the convex relaxation: capped water-filling with the multiplier
/// bisected so that the rates sum to `R0`.
pub fn kkt_rate(problem: &RateProblem, tol: BisectionSpec) -> Result<RateAllocation> {
    if screen_infeasible(problem) {
        return config("instance is screened infeasible");
    }
    let snrs = &problem.snrs;
    let caps = problem.caps();
    let lo = snrs.h.iter().map(|h| 1.0 / h).fold(f64::INFINITY, f64::min);
    let hi = snrs
        .h
        .iter()
        .zip(&snrs.g)
        .map(|(h, g)| 1.0 / h + problem.eps / g)
        .fold(0.0, f64::max);
    let total = |l: f64| rate_fill(l, snrs, &caps).iter().sum::<f64>();
    let lambda = bisect_monotone(total, problem.r0, tol.bracket(lo, hi))?;
    Ok(RateAllocation(rate_fill(lambda, snrs, &caps)))
}

/// Less-noisy margin in the rate domain.
pub fn delta_rate(r: &[f64], snrs: &BlockSnrs) -> f64 {
    r.iter()
        .zip(snrs.h.iter().zip(&snrs.g))
        .map(|(r, (h, g))| r - (r.exp_m1() * g / h).ln_1p())
        .sum()
}

/// Penalized descent objective `power(R) + eta (delta(R) - b)^2`.
pub fn penalized_objective(r: &[f64], snrs: &BlockSnrs, eta: f64, b: f64) -> f64 {
    let gap = delta_rate(r, snrs) - b;
    total_power(r, snrs) + eta * gap * gap
}

/// Gradient of [`penalized_objective`] in `R`, and its derivative in `b`.
pub fn penalized_gradient(r: &[f64], snrs: &BlockSnrs, eta: f64, b: f64) -> (Vec<f64>, f64) {
    let mut grad = vec![0.0; r.len()];
    let db = fill_gradient(r, snrs, eta, b, &mut grad);
    (grad, db)
}

fn fill_gradient(r: &[f64], snrs: &BlockSnrs, eta: f64, b: f64, out: &mut [f64]) -> f64 {
    let delta = delta_rate(r, snrs);
    let push = 2.0 * eta * (delta - b);
    for (i, ((r, h), g)) in r.iter().zip(&snrs.h).zip(&snrs.g).enumerate() {
        let e = r.exp();
        let d_margin = 1.0 - e * g / (h + (e - 1.0) * g);
        out[i] = e / h + push * d_margin;
    }
    -push
}

fn outcome(
    r: Vec<f64>,
    snrs: &BlockSnrs,
    status: Status,
    iterations: usize,
) -> AllocationOutcome<RateAllocation> {
    let objective = total_power(&r, snrs);
    let margin = delta_rate(&r, snrs);
    AllocationOutcome {
        allocation: RateAllocation(r),
        status,
        objective,
        margin,
        iterations,
    }
}

fn infeasible(len: usize, status: Status) -> AllocationOutcome<RateAllocation> {
    AllocationOutcome {
        allocation: RateAllocation::zeros(len),
        status,
        objective: f64::NAN,
        margin: 0.0,
        iterations: 0,
    }
}

/// Scales the full-budget allocation on blocks with `h >= g` by a common
/// factor `alpha` in `[0, 1]` chosen so that the rates sum to exactly `R0`.
///
/// Declares infeasibility when even `alpha = 1` falls short.
pub fn fallback_alpha(
    problem: &RateProblem,
    tol_alpha: BisectionSpec,
) -> Result<AllocationOutcome<RateAllocation>> {
    let snrs = &problem.snrs;
    let gains: Vec<f64> = snrs
        .h
        .iter()
        .zip(&snrs.g)
        .map(|(h, g)| if h >= g { problem.eps * h / g } else { 0.0 })
        .collect();
    let rates = |alpha: f64| -> Vec<f64> { gains.iter().map(|k| (alpha * k).ln_1p()).collect() };
    let sum_at = |alpha: f64| rates(alpha).iter().sum::<f64>();
    if sum_at(1.0) < problem.r0 {
        return Ok(infeasible(snrs.len(), Status::DeclaredInfeasible));
    }
    let alpha = bisect_monotone(sum_at, problem.r0, tol_alpha.bracket(0.0, 1.0))?;
    Ok(outcome(rates(alpha), snrs, Status::TrivialFallback, 0))
}

fn default_alpha_tol() -> BisectionSpec {
    BisectionSpec::with_tol(1e-12)
}

/// Penalized projected gradient descent from `init`.
///
/// A feasible end point costing no more than the [`fallback_alpha`] allocation
/// is returned as [`Status::PgdFeasible`]; otherwise the fallback result is
/// returned (which may declare infeasibility).
pub fn pgd_solve(
    problem: &RateProblem,
    init: &RateAllocation,
    params: &PenaltyParams,
) -> Result<AllocationOutcome<RateAllocation>> {
    pgd_solve_with(problem, init, params, default_alpha_tol())
}

fn pgd_solve_with(
    problem: &RateProblem,
    init: &RateAllocation,
    params: &PenaltyParams,
    tol_alpha: BisectionSpec,
) -> Result<AllocationOutcome<RateAllocation>> {
    params.validate()?;
    let snrs = &problem.snrs;
    if init.0.len() != snrs.len() {
        return config("initial allocation has the wrong length");
    }
    let caps = problem.caps();
    let mut r = project_rate_set(&init.0, &caps, problem.r0, POCS_CYCLES);
    let mut b = 0.0_f64;
    let eta0 = {
        let power = total_power(&r, snrs);
        let margin = delta_rate(&r, snrs);
        let eta = params.c * power / (margin * margin);
        if power == 0.0 || !eta.is_finite() {
            params.c
        } else {
            eta
        }
    };

    let mut grad = vec![0.0; r.len()];
    let mut iterations = 0;
    for n in 0..params.max_iters {
        iterations = n + 1;
        let eta = penalty_schedule(eta0, n, params);
        let db = fill_gradient(&r, snrs, eta, b, &mut grad);
        let descent: Vec<f64> = grad.iter().map(|d| -d).collect();
        let next = safeguarded_step(
            &r,
            &descent,
            params.alpha1,
            |x| project_rate_set(x, &caps, problem.r0, POCS_CYCLES),
            |x| -penalized_objective(x, snrs, eta, b),
        );
        // same gain cap as the power solver: the exact minimizer in b is max(delta, 0)
        let gain = (params.alpha2 * 2.0 * eta).min(1.0);
        let next_b = (b - gain * db / (2.0 * eta)).max(0.0);
        if !next_b.is_finite() || next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "projected gradient descent diverged at iteration {n} (eta = {eta:e}, b = {b:e})"
            )));
        }
        let moved = next
            .iter()
            .zip(&r)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt()
            .max((next_b - b).abs());
        r = next;
        b = next_b;
        if moved < params.delta_stop {
            break;
        }
    }

    let fallback = fallback_alpha(problem, tol_alpha)?;
    if fallback.is_feasible() && delta_rate(&r, snrs) < 0.0 {
        r = blend_to_margin(&r, &fallback.allocation.0, |x| delta_rate(x, snrs));
    }
    let margin = delta_rate(&r, snrs);
    let met = r.iter().sum::<f64>() >= problem.r0 - 1e-9;
    if margin >= -MARGIN_SLACK && met {
        let found = outcome(r, snrs, Status::PgdFeasible, iterations);
        if !fallback.is_feasible() || found.objective <= fallback.objective {
            return Ok(found);
        }
    }
    Ok(AllocationOutcome {
        iterations,
        ..fallback
    })
}

/// Screening, convex relaxation, penalized descent, then the scaled fallback.
pub fn solve_noncausal_rate(
    problem: &RateProblem,
    params: &PenaltyParams,
    tol: BisectionSpec,
    tol_alpha: BisectionSpec,
) -> Result<AllocationOutcome<RateAllocation>> {
    let snrs = &problem.snrs;
    if screen_infeasible(problem) {
        return Ok(infeasible(snrs.len(), Status::Infeasible));
    }
    let kkt = kkt_rate(problem, tol)?;
    if delta_rate(&kkt.0, snrs) >= -MARGIN_SLACK {
        return Ok(outcome(kkt.0, snrs, Status::OptimalConvex, 0));
    }
    pgd_solve_with(problem, &kkt, params, tol_alpha)
}
