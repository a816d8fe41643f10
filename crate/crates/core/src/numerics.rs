//! Scalar bisection, the alternating projectors used by the penalty solvers,
//! the penalty-factor schedule, and a finite-difference gradient checker.

use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

/// Alternation cap for the two-set projectors.
pub const POCS_CYCLES: usize = 100;

const POCS_MOVEMENT_STOP: f64 = 1e-12;
const MAX_BISECTION_ITERS: usize = 200;
const BRACKET_CAP: f64 = 1e12;
const MAX_STEP_HALVINGS: usize = 60;

/// Settings of the penalized projected-gradient solvers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PenaltyParams {
    /// Initial penalty multiplier; the starting penalized objective is
    /// `(1 - c)` (ascent) or `(1 + c)` (descent) times the plain objective.
    pub c: f64,
    /// Step size on the allocation vector.
    pub alpha1: f64,
    /// Step size on the auxiliary slack `b`.
    pub alpha2: f64,
    /// Iterations between penalty increases.
    pub n_update: usize,
    pub gamma_growth: f64,
    pub delta_stop: f64,
    pub max_iters: usize,
}

impl Default for PenaltyParams {
    fn default() -> Self {
        Self {
            c: 20.0,
            alpha1: 1e-6,
            alpha2: 1e-6,
            n_update: 10,
            gamma_growth: 0.2,
            delta_stop: 1e-6,
            max_iters: 200_000,
        }
    }
}

impl PenaltyParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c >= 1.0) {
            return config("penalty multiplier C must be at least 1");
        }
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return config("step sizes must be positive");
        }
        if self.n_update == 0 || self.max_iters == 0 {
            return config("N and max_iters must be at least 1");
        }
        if !(self.gamma_growth > 0.0 && self.delta_stop > 0.0) {
            return config("growth rate and stopping threshold must be positive");
        }
        Ok(())
    }
}

/// Bracket and relative tolerance for [`bisect_monotone`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BisectionSpec {
    pub lo: f64,
    pub hi: f64,
    pub rel_tol: f64,
}

impl BisectionSpec {
    pub fn new(lo: f64, hi: f64, rel_tol: f64) -> Self {
        Self { lo, hi, rel_tol }
    }

    /// Default starting bracket `[1e-12, 1]` with the given tolerance.
    pub fn with_tol(rel_tol: f64) -> Self {
        Self::new(1e-12, 1.0, rel_tol)
    }

    /// Same tolerance, different bracket.
    pub fn bracket(self, lo: f64, hi: f64) -> Self {
        Self { lo, hi, ..self }
    }
}

impl Default for BisectionSpec {
    fn default() -> Self {
        Self::with_tol(1e-12)
    }
}

/// Solves `f(x) = target` for a monotone `f` by bisection.
///
/// If the target is not bracketed by `[lo, hi]`, `hi` is doubled until it is
/// (up to `1e12`). Stops once `|f(x) - target| / max(|target|, 1) <= rel_tol`,
/// or when the interval can no longer shrink.
pub fn bisect_monotone<F>(f: F, target: f64, spec: BisectionSpec) -> Result<f64>
where
    F: Fn(f64) -> f64,
{
    if !(spec.lo < spec.hi) || !(spec.rel_tol > 0.0) {
        return config("bisection needs lo < hi and a positive tolerance");
    }
    let scale = target.abs().max(1.0);
    let close = |v: f64| (v - target).abs() / scale <= spec.rel_tol;

    let (mut lo, mut hi) = (spec.lo, spec.hi);
    let mut f_lo = f(lo);
    let mut f_hi = f(hi);
    let bracketed = |a: f64, b: f64| (a - target) * (b - target) <= 0.0;
    while !bracketed(f_lo, f_hi) {
        if hi >= BRACKET_CAP {
            return Err(Error::Numerical(format!(
                "target {target} not bracketed on [{}, {hi}] (f = {f_lo}..{f_hi})",
                spec.lo
            )));
        }
        lo = hi;
        f_lo = f_hi;
        hi = (hi * 2.0).min(BRACKET_CAP);
        f_hi = f(hi);
    }
    if close(f_lo) {
        return Ok(lo);
    }
    if close(f_hi) {
        return Ok(hi);
    }
    let increasing = f_hi >= f_lo;
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..MAX_BISECTION_ITERS {
        mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let v = f(mid);
        if !v.is_finite() {
            return Err(Error::Numerical(format!("non-finite value at x = {mid}")));
        }
        if close(v) {
            return Ok(mid);
        }
        if (v < target) == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(mid)
}

/// Projects onto `{0 <= p_l <= caps_l, sum p <= total}` by alternating the box
/// clip with a radial rescale by `total / sum` whenever the sum is exceeded.
pub fn project_power_set(p: &[f64], caps: &[f64], total: f64, cycles: usize) -> Vec<f64> {
    debug_assert_eq!(p.len(), caps.len());
    let mut cur = p.to_vec();
    for _ in 0..cycles.max(1) {
        let before = cur.clone();
        clip_box(&mut cur, caps);
        let sum: f64 = cur.iter().sum();
        if sum > total {
            let s = total / sum;
            cur.iter_mut().for_each(|x| *x *= s);
        }
        if max_abs_diff(&before, &cur) < POCS_MOVEMENT_STOP {
            break;
        }
    }
    cur
}

/// Projects onto `{0 <= r_l <= caps_l, sum r >= floor_total}` by alternating
/// the box clip with a radial up-scaling by `floor_total / sum`.
///
/// Radial up-scaling cannot move coordinates that sit at zero and converges
/// slowly near the caps, so when the alternation ends short of the floor the
/// point is finished with the exact Euclidean projection, a uniform shift
/// clipped to the box.
pub fn project_rate_set(r: &[f64], caps: &[f64], floor_total: f64, cycles: usize) -> Vec<f64> {
    debug_assert_eq!(r.len(), caps.len());
    let mut cur = r.to_vec();
    for _ in 0..cycles.max(1) {
        let before = cur.clone();
        clip_box(&mut cur, caps);
        let sum: f64 = cur.iter().sum();
        if sum < floor_total && sum > 0.0 {
            let s = floor_total / sum;
            cur.iter_mut().for_each(|x| *x *= s);
        }
        if max_abs_diff(&before, &cur) < POCS_MOVEMENT_STOP {
            break;
        }
    }
    clip_box(&mut cur, caps);
    let sum: f64 = cur.iter().sum();
    if sum < floor_total {
        shift_into_rate_set(&mut cur, caps, floor_total);
    }
    cur
}

fn shift_into_rate_set(r: &mut [f64], caps: &[f64], floor_total: f64) {
    let cap_sum: f64 = caps.iter().sum();
    if cap_sum <= floor_total {
        r.copy_from_slice(caps);
        return;
    }
    let shifted = |t: f64| -> f64 {
        r.iter()
            .zip(caps)
            .map(|(&x, &c)| (x + t).clamp(0.0, c))
            .sum()
    };
    let (mut lo, mut hi) = (0.0, caps.iter().cloned().fold(0.0, f64::max));
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if shifted(mid) < floor_total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-15 {
            break;
        }
    }
    for (x, &c) in r.iter_mut().zip(caps) {
        *x = (*x + hi).clamp(0.0, c);
    }
}

fn clip_box(v: &mut [f64], caps: &[f64]) {
    for (x, &c) in v.iter_mut().zip(caps) {
        *x = x.clamp(0.0, c);
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// One projected step `project(x + step * dir)` that is not allowed to lower
/// `value`. The step is halved until the projected point does at least as
/// well as `x` (up to rounding); if no step does, `x` is returned unchanged.
/// Pass the ascent direction; for descent, negate both the direction and the
/// value.
pub fn safeguarded_step<P, V>(x: &[f64], dir: &[f64], step: f64, project: P, value: V) -> Vec<f64>
where
    P: Fn(&[f64]) -> Vec<f64>,
    V: Fn(&[f64]) -> f64,
{
    let base = value(x);
    let slack = 1e-12 * base.abs().max(1.0);
    let mut step = step;
    let mut trial = vec![0.0; x.len()];
    for _ in 0..MAX_STEP_HALVINGS {
        for ((t, xi), d) in trial.iter_mut().zip(x).zip(dir) {
            *t = xi + step * d;
        }
        let cand = project(&trial);
        if value(&cand) >= base - slack {
            return cand;
        }
        step *= 0.5;
    }
    x.to_vec()
}

/// Walks the segment from `from` toward `to` and returns the point nearest to
/// `from` whose `margin` is nonnegative, found by bisection on the blend
/// weight. `to` must itself have a nonnegative margin.
pub fn blend_to_margin<M>(from: &[f64], to: &[f64], margin: M) -> Vec<f64>
where
    M: Fn(&[f64]) -> f64,
{
    let mix = |t: f64| -> Vec<f64> {
        from.iter()
            .zip(to)
            .map(|(a, b)| (1.0 - t) * a + t * b)
            .collect()
    };
    if margin(from) >= 0.0 {
        return from.to_vec();
    }
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..MAX_BISECTION_ITERS {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if margin(&mix(mid)) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    mix(hi)
}

/// Penalty factor after `n` iterations: `eta0 * (1 + gamma * floor(n / N))`.
pub fn penalty_schedule(eta0: f64, n: usize, params: &PenaltyParams) -> f64 {
    eta0 * (1.0 + params.gamma_growth * (n / params.n_update) as f64)
}

/// Largest coordinate-wise error between `grad(x)` and central differences of
/// `f` with step `1e-6`. Errors are relative, with magnitudes below one
/// compared absolutely.
pub fn check_gradient<F, G>(f: F, grad: G, x: &[f64]) -> f64
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    const STEP: f64 = 1e-6;
    let analytic = grad(x);
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        probe[i] = x[i] + STEP;
        let up = f(&probe);
        probe[i] = x[i] - STEP;
        let down = f(&probe);
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * STEP);
        let denom = analytic[i].abs().max(numeric.abs()).max(1.0);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn safeguarded_step_backtracks_past_overshoot() {
        // maximize -(x - 1)^2 from 0; the full step lands at 6, then 3, then 1.5
        let value = |x: &[f64]| -(x[0] - 1.0) * (x[0] - 1.0);
        let next = safeguarded_step(&[0.0], &[3.0], 2.0, |x| x.to_vec(), value);
        assert_eq!(next, vec![1.5]);
        // a full step that improves is taken as is
        let next = safeguarded_step(&[0.0], &[2.0], 0.25, |x| x.to_vec(), value);
        assert_eq!(next, vec![0.5]);
        // a wrong direction only ever moves within rounding slack
        let next = safeguarded_step(&[0.0], &[-1.0], 1.0, |x| x.to_vec(), value);
        assert!(next[0] <= 0.0 && next[0] > -1e-9);
    }

    #[test]
    fn bisect_identity_and_square() {
        let x = bisect_monotone(|x| x, 0.5, BisectionSpec::new(0.0, 1.0, 1e-9)).unwrap();
        assert!((x - 0.5).abs() < 1e-9);
        let r = bisect_monotone(|x| x * x, 2.0, BisectionSpec::new(0.0, 2.0, 1e-9)).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn bisect_expands_bracket() {
        let x = bisect_monotone(|x| x, 1234.5, BisectionSpec::with_tol(1e-12)).unwrap();
        assert!((x - 1234.5).abs() < 1e-6);
    }

    #[test]
    fn bisect_decreasing() {
        let x = bisect_monotone(|x| 10.0 - x, 3.0, BisectionSpec::new(0.0, 10.0, 1e-12)).unwrap();
        assert!((x - 7.0).abs() < 1e-10);
    }

    #[test]
    fn bisect_fails_when_unreachable() {
        let err = bisect_monotone(|x| x.min(5.0), 10.0, BisectionSpec::with_tol(1e-9));
        assert!(matches!(err, Err(Error::Numerical(_))));
    }

    #[test]
    fn bisect_water_level() {
        // two blocks, h = [1, 4], uncapped: sum (zeta - 1/h)^+ = 1
        let total = |z: f64| (z - 1.0).max(0.0) + (z - 0.25).max(0.0);
        let z = bisect_monotone(total, 1.0, BisectionSpec::new(0.25, 10.0, 1e-12)).unwrap();
        assert!((z - 1.125).abs() < 1e-10);
    }

    #[test]
    fn power_projection_examples() {
        let inside = [0.5, 0.2];
        assert_eq!(
            project_power_set(&inside, &[1.0, 1.0], 10.0, POCS_CYCLES),
            inside
        );
        assert_eq!(
            project_power_set(&[2.0, 2.0], &[1.0, 1.0], 10.0, POCS_CYCLES),
            vec![1.0, 1.0]
        );
        assert_eq!(
            project_power_set(&[2.0, 2.0], &[3.0, 3.0], 2.0, POCS_CYCLES),
            vec![1.0, 1.0]
        );
        assert_eq!(
            project_power_set(&[-1.0, 0.5], &[3.0, 3.0], 2.0, POCS_CYCLES),
            vec![0.0, 0.5]
        );
    }

    #[test]
    fn rate_projection_examples() {
        let inside = [1.5, 0.7];
        assert_eq!(
            project_rate_set(&inside, &[2.0, 2.0], 1.0, POCS_CYCLES),
            inside
        );
        assert_eq!(
            project_rate_set(&[0.5, 0.5], &[2.0, 2.0], 2.0, POCS_CYCLES),
            vec![1.0, 1.0]
        );
        assert_eq!(
            project_rate_set(&[3.0, 3.0], &[1.0, 1.0], 1.0, POCS_CYCLES),
            vec![1.0, 1.0]
        );
    }

    #[test]
    fn rate_projection_unsticks_zero_coordinates() {
        let out = project_rate_set(&[1.0, 0.0], &[1.0, 100.0], 1.5, POCS_CYCLES);
        assert!(out[0] <= 1.0 && out[1] <= 100.0);
        assert!(out.iter().sum::<f64>() >= 1.5 - 1e-9);
    }

    #[test]
    fn schedule_examples() {
        let p = PenaltyParams {
            n_update: 10,
            gamma_growth: 0.2,
            ..PenaltyParams::default()
        };
        assert_eq!(penalty_schedule(1.0, 0, &p), 1.0);
        assert!((penalty_schedule(1.0, 10, &p) - 1.2).abs() < 1e-15);
        assert!((penalty_schedule(2.0, 25, &p) - 2.8).abs() < 1e-15);
    }

    #[test]
    fn gradient_check_quadratic() {
        let err = check_gradient(
            |x| x.iter().map(|v| v * v).sum(),
            |x| x.iter().map(|v| 2.0 * v).collect(),
            &[1.0, 2.0],
        );
        assert!(err < 1e-6);
        let bad = check_gradient(|x| x[0] * x[0], |x| vec![3.0 * x[0]], &[1.0]);
        assert!(bad > 0.1);
    }

    #[test]
    fn params_validation() {
        assert!(PenaltyParams::default().validate().is_ok());
        let p = PenaltyParams {
            c: 0.5,
            ..PenaltyParams::default()
        };
        assert!(p.validate().is_err());
        let p = PenaltyParams {
            n_update: 0,
            ..PenaltyParams::default()
        };
        assert!(p.validate().is_err());
    }

    proptest! {
        #[test]
        fn power_projection_feasible_and_idempotent(
            p in proptest::collection::vec(-2.0f64..5.0, 1..8),
            seed_caps in proptest::collection::vec(0.01f64..3.0, 8),
            total in 0.01f64..10.0,
        ) {
            let caps = &seed_caps[..p.len()];
            let once = project_power_set(&p, caps, total, POCS_CYCLES);
            for (x, c) in once.iter().zip(caps) {
                prop_assert!(*x >= 0.0 && x <= c);
            }
            prop_assert!(once.iter().sum::<f64>() <= total + 1e-9);
            let twice = project_power_set(&once, caps, total, POCS_CYCLES);
            prop_assert!(max_abs_diff(&once, &twice) < 1e-12);
        }

        #[test]
        fn rate_projection_feasible_and_idempotent(
            r in proptest::collection::vec(-1.0f64..4.0, 1..8),
            seed_caps in proptest::collection::vec(0.05f64..3.0, 8),
            frac in 0.0f64..1.0,
        ) {
            let caps = &seed_caps[..r.len()];
            let floor = frac * caps.iter().sum::<f64>();
            let once = project_rate_set(&r, caps, floor, POCS_CYCLES);
            for (x, c) in once.iter().zip(caps) {
                prop_assert!(*x >= 0.0 && x <= c);
            }
            prop_assert!(once.iter().sum::<f64>() >= floor - 1e-9);
            let twice = project_rate_set(&once, caps, floor, POCS_CYCLES);
            prop_assert!(max_abs_diff(&once, &twice) < 1e-12);
        }

        #[test]
        fn schedule_nondecreasing(eta0 in 1e-3f64..1e3, n in 0usize..10_000) {
            let p = PenaltyParams::default();
            prop_assert!(penalty_schedule(eta0, n + 1, &p) >= penalty_schedule(eta0, n, &p));
        }

        #[test]
        fn bisection_stable_under_tighter_tolerance(target in 0.01f64..50.0) {
            let tau = 1e-9;
            let f = |x: f64| x.powi(3) + x;
            let a = bisect_monotone(f, target, BisectionSpec::with_tol(tau)).unwrap();
            let b = bisect_monotone(f, target, BisectionSpec::with_tol(tau / 2.0)).unwrap();
            prop_assert!((f(a) - f(b)).abs() / target.max(1.0) <= 2.0 * tau);
        }
    }
}
