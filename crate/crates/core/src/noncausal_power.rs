//! Sum covert rate maximization with the whole channel known in advance.
//!
//! ```text
//! max  sum ln(1 + h_l P_l)
//! s.t. sum P_l <= P0,  g_l P_l <= eps,
//!      sum ln(1 + h_l P_l) >= sum ln(1 + g_l P_l)
//! ```
//!
//! The last (less-noisy) constraint makes the problem non-convex. The solver
//! checks feasibility, tries the water-filling solution of the convex
//! relaxation, and otherwise runs a penalized projected gradient ascent from
//! that water-filling point, falling back to a scaled closed-form allocation.

use serde::{Deserialize, Serialize};

use crate::channel::BlockSnrs;
use crate::error::{config, Error, Result};
use crate::numerics::{
    bisect_monotone, blend_to_margin, penalty_schedule, project_power_set, safeguarded_step,
    BisectionSpec, PenaltyParams, POCS_CYCLES,
};
use crate::outcome::{AllocationOutcome, Status, MARGIN_SLACK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProblem {
    pub snrs: BlockSnrs,
    /// Total power budget (linear).
    pub p0: f64,
    /// Per-block covertness budget on `g_l P_l` (linear).
    pub eps: f64,
}

impl PowerProblem {
    pub fn new(snrs: BlockSnrs, p0: f64, eps: f64) -> Result<Self> {
        if !(p0 > 0.0 && p0.is_finite()) {
            return config("P0 must be positive and finite");
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return config("eps must be positive and finite");
        }
        Ok(Self { snrs, p0, eps })
    }

    /// Per-block power caps `eps / g_l`.
    pub fn caps(&self) -> Vec<f64> {
        self.snrs.g.iter().map(|g| self.eps / g).collect()
    }
}

/// Per-block transmit powers (linear).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PowerAllocation(pub Vec<f64>);

impl PowerAllocation {
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

/// `sum ln(1 + h_l P_l)` in nats.
pub fn sum_rate(p: &[f64], snrs: &BlockSnrs) -> f64 {
    p.iter().zip(&snrs.h).map(|(p, h)| (p * h).ln_1p()).sum()
}

/// A positive covert rate exists iff some block has `h_l >= g_l`.
pub fn check_feasible(snrs: &BlockSnrs) -> bool {
    snrs.h.iter().zip(&snrs.g).any(|(h, g)| h >= g)
}

/// Full covertness budget on every block with `h_l >= g_l`, scaled down by a
/// common factor when that would exceed `P0`. Zero on the other blocks.
pub fn trivial_power(problem: &PowerProblem) -> PowerAllocation {
    let snrs = &problem.snrs;
    let good_caps: f64 = snrs
        .h
        .iter()
        .zip(&snrs.g)
        .filter(|(h, g)| h >= g)
        .map(|(_, g)| problem.eps / g)
        .sum();
    if good_caps == 0.0 {
        return PowerAllocation::zeros(snrs.len());
    }
    let alpha = (problem.p0 / good_caps).min(1.0);
    PowerAllocation(
        snrs.h
            .iter()
            .zip(&snrs.g)
            .map(|(h, g)| if h >= g { alpha * problem.eps / g } else { 0.0 })
            .collect(),
    )
}

/// Water-filling at level `zeta` with per-block caps.
pub fn water_fill(zeta: f64, snrs: &BlockSnrs, eps: f64) -> Vec<f64> {
    snrs.h
        .iter()
        .zip(&snrs.g)
        .map(|(h, g)| (zeta - 1.0 / h).clamp(0.0, eps / g))
        .collect()
}

/// Optimum of the convex relaxation (less-noisy constraint dropped).
///
/// Returns the caps when they fit in the budget, otherwise the capped
/// water-filling whose level is bisected to spend exactly `P0`.
pub fn kkt_power(problem: &PowerProblem, tol: BisectionSpec) -> Result<PowerAllocation> {
    let snrs = &problem.snrs;
    let caps = problem.caps();
    if caps.iter().sum::<f64>() <= problem.p0 {
        return Ok(PowerAllocation(caps));
    }
    let lo = snrs.h.iter().map(|h| 1.0 / h).fold(f64::INFINITY, f64::min);
    let hi = snrs
        .h
        .iter()
        .zip(&caps)
        .map(|(h, c)| 1.0 / h + c)
        .fold(0.0, f64::max);
    let total = |z: f64| water_fill(z, snrs, problem.eps).iter().sum::<f64>();
    let zeta = bisect_monotone(total, problem.p0, tol.bracket(lo, hi))?;
    Ok(PowerAllocation(water_fill(zeta, snrs, problem.eps)))
}

/// Less-noisy margin `sum ln(1 + h P) - sum ln(1 + g P)`.
pub fn delta_power(p: &[f64], snrs: &BlockSnrs) -> f64 {
    p.iter()
        .zip(snrs.h.iter().zip(&snrs.g))
        .map(|(p, (h, g))| (p * h).ln_1p() - (p * g).ln_1p())
        .sum()
}

/// Penalized ascent objective `rate(P) - eta (delta(P) - b)^2`.
pub fn penalized_objective(p: &[f64], snrs: &BlockSnrs, eta: f64, b: f64) -> f64 {
    let gap = delta_power(p, snrs) - b;
    sum_rate(p, snrs) - eta * gap * gap
}

/// Gradient of [`penalized_objective`] with respect to `P`, and its
/// derivative with respect to `b`.
pub fn penalized_gradient(p: &[f64], snrs: &BlockSnrs, eta: f64, b: f64) -> (Vec<f64>, f64) {
    let mut grad = vec![0.0; p.len()];
    let db = fill_gradient(p, snrs, eta, b, &mut grad);
    (grad, db)
}

fn fill_gradient(p: &[f64], snrs: &BlockSnrs, eta: f64, b: f64, out: &mut [f64]) -> f64 {
    let mut delta = 0.0;
    for ((p, h), g) in p.iter().zip(&snrs.h).zip(&snrs.g) {
        delta += (p * h).ln_1p() - (p * g).ln_1p();
    }
    let pull = 2.0 * eta * (delta - b);
    for (i, ((p, h), g)) in p.iter().zip(&snrs.h).zip(&snrs.g).enumerate() {
        let dh = h / (1.0 + p * h);
        let dg = g / (1.0 + p * g);
        out[i] = dh - pull * (dh - dg);
    }
    pull
}

fn initial_penalty(c: f64, objective: f64, margin: f64) -> f64 {
    let eta = c * objective / (margin * margin);
    if objective == 0.0 || !eta.is_finite() {
        c
    } else {
        eta
    }
}

/// Penalized projected gradient ascent from `init`.
///
/// A feasible end point is returned as [`Status::PgaFeasible`] unless the
/// closed-form allocation of [`trivial_power`] achieves a higher rate, in which
/// case that allocation is returned as [`Status::TrivialFallback`].
pub fn pga_solve(
    problem: &PowerProblem,
    init: &PowerAllocation,
    params: &PenaltyParams,
) -> Result<AllocationOutcome<PowerAllocation>> {
    params.validate()?;
    let snrs = &problem.snrs;
    if init.0.len() != snrs.len() {
        return config("initial allocation has the wrong length");
    }
    let caps = problem.caps();
    let mut p = project_power_set(&init.0, &caps, problem.p0, POCS_CYCLES);
    let mut b = 0.0_f64;
    let eta0 = initial_penalty(params.c, sum_rate(&p, snrs), delta_power(&p, snrs));

    let mut grad = vec![0.0; p.len()];
    let mut iterations = 0;
    for n in 0..params.max_iters {
        iterations = n + 1;
        let eta = penalty_schedule(eta0, n, params);
        let pull = fill_gradient(&p, snrs, eta, b, &mut grad);
        let next = safeguarded_step(
            &p,
            &grad,
            params.alpha1,
            |x| project_power_set(x, &caps, problem.p0, POCS_CYCLES),
            |x| penalized_objective(x, snrs, eta, b),
        );
        // pull = 2 eta (delta - b); a gain above one would overshoot the
        // exact maximizer max(delta, 0) of the penalty in b
        let gain = (params.alpha2 * 2.0 * eta).min(1.0);
        let next_b = (b + gain * pull / (2.0 * eta)).max(0.0);
        if !next_b.is_finite() || next.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numerical(format!(
                "projected gradient ascent diverged at iteration {n} (eta = {eta:e}, b = {b:e})"
            )));
        }
        let moved = next
            .iter()
            .zip(&p)
            .map(|(a, c)| (a - c) * (a - c))
            .sum::<f64>()
            .sqrt()
            .max((next_b - b).abs());
        p = next;
        b = next_b;
        if moved < params.delta_stop {
            break;
        }
    }

    let trivial = trivial_power(problem);
    let trivial_rate = sum_rate(&trivial.0, snrs);
    if delta_power(&p, snrs) < 0.0 {
        p = blend_to_margin(&p, &trivial.0, |x| delta_power(x, snrs));
    }
    let margin = delta_power(&p, snrs);
    let rate = sum_rate(&p, snrs);
    if margin >= -MARGIN_SLACK && rate >= trivial_rate {
        Ok(AllocationOutcome {
            allocation: PowerAllocation(p),
            status: Status::PgaFeasible,
            objective: rate,
            margin,
            iterations,
        })
    } else {
        let margin = delta_power(&trivial.0, snrs);
        Ok(AllocationOutcome {
            allocation: trivial,
            status: Status::TrivialFallback,
            objective: trivial_rate,
            margin,
            iterations,
        })
    }
}

/// Feasibility check, convex relaxation, then penalized ascent.
pub fn solve_noncausal_power(
    problem: &PowerProblem,
    params: &PenaltyParams,
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
        let objective = sum_rate(&kkt.0, snrs);
        return Ok(AllocationOutcome {
            allocation: kkt,
            status: Status::OptimalConvex,
            objective,
            margin,
            iterations: 0,
        });
    }
    pga_solve(problem, &kkt, params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradient;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn snrs(h: &[f64], g: &[f64]) -> BlockSnrs {
        BlockSnrs::new(h.to_vec(), g.to_vec()).unwrap()
    }

    fn tol() -> BisectionSpec {
        BisectionSpec::with_tol(1e-12)
    }

    #[test]
    fn feasibility_condition() {
        assert!(check_feasible(&snrs(&[2.0, 1.0], &[1.0, 2.0])));
        assert!(!check_feasible(&snrs(&[0.5], &[1.0])));
        assert!(check_feasible(&snrs(&[1.3, 0.2], &[1.3, 0.2])));
    }

    #[test]
    fn trivial_examples() {
        let pr = PowerProblem::new(snrs(&[1.0, 1.0], &[0.5, 0.25]), 3.0, 1.0).unwrap();
        let p = trivial_power(&pr);
        assert!((p.0[0] - 1.0).abs() < 1e-12 && (p.0[1] - 2.0).abs() < 1e-12);

        let pr = PowerProblem::new(snrs(&[2.0, 1.0], &[1.0, 2.0]), 10.0, 1.0).unwrap();
        assert_eq!(trivial_power(&pr).0, vec![1.0, 0.0]);

        let pr = PowerProblem::new(snrs(&[0.5, 0.1], &[1.0, 2.0]), 10.0, 1.0).unwrap();
        assert_eq!(trivial_power(&pr).0, vec![0.0, 0.0]);
    }

    #[test]
    fn kkt_single_block() {
        let pr = PowerProblem::new(snrs(&[2.0], &[0.01]), 3.0, 1.0).unwrap();
        let p = kkt_power(&pr, tol()).unwrap();
        assert!((p.0[0] - 3.0).abs() < 1e-9);
    }

    #[test]
    fn kkt_two_blocks_hand_water_level() {
        // zeta solves (zeta - 1) + (zeta - 1/4) = 1, i.e. zeta = 1.125
        let pr = PowerProblem::new(snrs(&[1.0, 4.0], &[1e-6, 1e-6]), 1.0, 1.0).unwrap();
        let p = kkt_power(&pr, tol()).unwrap();
        assert!((p.0[0] - 0.125).abs() < 1e-9, "{:?}", p.0);
        assert!((p.0[1] - 0.875).abs() < 1e-9, "{:?}", p.0);
    }

    #[test]
    fn kkt_caps_when_budget_is_loose() {
        let pr = PowerProblem::new(snrs(&[1.0, 3.0], &[2.0, 4.0]), 10.0, 1.0).unwrap();
        assert_eq!(kkt_power(&pr, tol()).unwrap().0, vec![0.5, 0.25]);
    }

    #[test]
    fn delta_examples() {
        let s = snrs(&[2.0], &[1.0]);
        assert_eq!(delta_power(&[0.0], &s), 0.0);
        assert!((delta_power(&[1.0], &s) - (3f64.ln() - 2f64.ln())).abs() < 1e-15);
        let same = snrs(&[0.7, 2.0], &[0.7, 2.0]);
        assert_eq!(delta_power(&[0.3, 1.1], &same), 0.0);
    }

    #[test]
    fn penalized_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..8.0)).collect();
            let g: Vec<f64> = (0..5).map(|_| rng.random_range(0.1..8.0)).collect();
            let s = snrs(&h, &g);
            let x: Vec<f64> = (0..5).map(|_| rng.random_range(0.05..2.0)).collect();
            let eta = rng.random_range(0.1..50.0);
            let b = rng.random_range(0.0..0.5);
            let err = check_gradient(
                |p| penalized_objective(p, &s, eta, b),
                |p| penalized_gradient(p, &s, eta, b).0,
                &x,
            );
            assert!(err < 1e-5, "gradient error {err}");
            let (_, db) = penalized_gradient(&x, &s, eta, b);
            let fd = (penalized_objective(&x, &s, eta, b + 1e-6)
                - penalized_objective(&x, &s, eta, b - 1e-6))
                / 2e-6;
            assert!((db - fd).abs() / db.abs().max(1.0) < 1e-5);
        }
    }

    #[test]
    fn infeasible_instance() {
        let pr = PowerProblem::new(snrs(&[0.5, 1.0], &[1.0, 2.0]), 3.0, 1.0).unwrap();
        let out = solve_noncausal_power(&pr, &PenaltyParams::default(), tol()).unwrap();
        assert_eq!(out.status, Status::Infeasible);
        assert_eq!(out.objective, 0.0);
        assert_eq!(out.allocation.total(), 0.0);
    }

    #[test]
    fn dominant_legitimate_channel_is_convex_optimal() {
        let pr = PowerProblem::new(snrs(&[3.0, 2.0, 5.0], &[1.0, 2.0, 0.5]), 3.0, 1.0).unwrap();
        let out = solve_noncausal_power(&pr, &PenaltyParams::default(), tol()).unwrap();
        assert_eq!(out.status, Status::OptimalConvex);
        assert!(out.margin >= 0.0);
    }

    #[test]
    fn equal_channels_keep_kkt_rate() {
        let s = snrs(&[1.5, 0.4, 3.0], &[1.5, 0.4, 3.0]);
        let pr = PowerProblem::new(s.clone(), 2.0, 1.0).unwrap();
        let kkt = kkt_power(&pr, tol()).unwrap();
        let out = pga_solve(&pr, &kkt, &PenaltyParams::default()).unwrap();
        assert!((out.objective - sum_rate(&kkt.0, &s)).abs() < 1e-6);
    }

    #[test]
    fn mixed_instance_is_clean_and_bracketed() {
        // KKT puts power on the third block where g > h and breaks the margin
        let s = snrs(&[1.2, 0.8, 6.0, 0.5], &[1.0, 3.0, 7.5, 2.0]);
        let pr = PowerProblem::new(s.clone(), 3.162, 1.0).unwrap();
        let kkt = kkt_power(&pr, tol()).unwrap();
        assert!(delta_power(&kkt.0, &s) < 0.0);
        let out = solve_noncausal_power(&pr, &PenaltyParams::default(), tol()).unwrap();
        assert!(matches!(
            out.status,
            Status::PgaFeasible | Status::TrivialFallback
        ));
        assert!(out.margin >= -MARGIN_SLACK);
        assert!(out.allocation.total() <= pr.p0 + 1e-9);
        for (p, g) in out.allocation.0.iter().zip(&s.g) {
            assert!(g * p <= pr.eps + 1e-9);
        }
        let triv = sum_rate(&trivial_power(&pr).0, &s);
        assert!(out.objective >= triv - 1e-9);
        assert!(out.objective <= sum_rate(&kkt.0, &s) + 1e-9);
    }

    #[test]
    fn rejects_bad_problem() {
        let s = snrs(&[1.0], &[1.0]);
        assert!(PowerProblem::new(s.clone(), 0.0, 1.0).is_err());
        assert!(PowerProblem::new(s, 1.0, -1.0).is_err());
    }
}
