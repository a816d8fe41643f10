//! Monte-Carlo experiment runner.
//!
//! A sweep varies one parameter over a list of values. For every value
//! ("cell") it draws `trials` channel realizations, runs every requested
//! scheme on the same realizations, and aggregates one [`ResultRow`] per
//! scheme. Trial `t` always sees the channel seeded by `(master seed, t)`,
//! in every cell, whatever the thread count and scheme list. Reusing the
//! draws across cells keeps curves smooth and their monotone trends free of
//! sampling noise.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    causal_average_power_rollout, causal_average_rate, causal_trivial_power_rollout,
    causal_trivial_rate, noncausal_power_convex_baseline, noncausal_power_trivial_baseline,
    noncausal_rate_baselines,
};
use crate::causal_mdp::{margin_gain, ActionGrid};
use crate::causal_rate::{causal_rate_rollout, rate_to_power_budget};
use crate::channel::{db_to_linear, BlockSnrs, ChannelConfig, ChannelModel};
use crate::checkpoint::Checkpoint;
use crate::error::{config, Error, Result};
use crate::noncausal_power::{
    delta_power, solve_noncausal_power, sum_rate, PowerAllocation, PowerProblem,
};
use crate::noncausal_rate::{
    delta_rate, solve_noncausal_rate, total_power, RateAllocation, RateProblem,
};
use crate::numerics::{BisectionSpec, PenaltyParams};
use crate::outcome::MARGIN_SLACK;
use crate::qlearn::{greedy_rollout, train, QNetwork, TrainConfig};

/// Which allocation problem an experiment solves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Maximize the sum covert rate with all SNRs known in advance.
    NoncausalPower,
    /// Minimize total power for a rate requirement with all SNRs known.
    NoncausalRate,
    /// Maximize the sum covert rate block by block.
    CausalPower,
    /// Meet a rate requirement block by block.
    CausalRate,
}

impl Mode {
    pub fn is_rate(self) -> bool {
        matches!(self, Mode::NoncausalRate | Mode::CausalRate)
    }

    pub fn is_causal(self) -> bool {
        matches!(self, Mode::CausalPower | Mode::CausalRate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Total power budget in dB.
    P0Db,
    /// Rate requirement in nats.
    R0,
    /// Covertness budget in dB.
    EpsDb,
    SnrHDb,
    SnrGDb,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::P0Db => "p0_db",
            SweepAxis::R0 => "r0",
            SweepAxis::EpsDb => "eps_db",
            SweepAxis::SnrHDb => "snr_h_db",
            SweepAxis::SnrGDb => "snr_g_db",
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SweepAxis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "p0_db" => SweepAxis::P0Db,
            "r0" => SweepAxis::R0,
            "eps_db" => SweepAxis::EpsDb,
            "snr_h_db" => SweepAxis::SnrHDb,
            "snr_g_db" => SweepAxis::SnrGDb,
            _ => return config(format!("unknown sweep axis {s:?}")),
        })
    }
}

/// Allocation scheme identifiers.
///
/// In the non-causal modes `proposed` is the penalized gradient solver,
/// `convex` the relaxation-or-trivial baseline and `trivial` the scaled
/// allocation on blocks with `h >= g`. In the causal modes `ddqn`, `average`
/// and `trivial` are the block-by-block schemes, while `proposed` and `convex`
/// run the non-causal solvers on the same channels as a reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Proposed,
    Convex,
    Trivial,
    Ddqn,
    Average,
}

impl Scheme {
    pub fn as_str(self) -> &'static str {
        match self {
            Scheme::Proposed => "proposed",
            Scheme::Convex => "convex",
            Scheme::Trivial => "trivial",
            Scheme::Ddqn => "ddqn",
            Scheme::Average => "average",
        }
    }

    fn allowed_in(self, mode: Mode) -> bool {
        mode.is_causal() || matches!(self, Scheme::Proposed | Scheme::Convex | Scheme::Trivial)
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "proposed" => Scheme::Proposed,
            "convex" => Scheme::Convex,
            "trivial" => Scheme::Trivial,
            "ddqn" => Scheme::Ddqn,
            "average" => Scheme::Average,
            _ => return config(format!("unknown scheme {s:?}")),
        })
    }
}

/// How per-trial objectives are averaged into a row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Every trial counts; an infeasible power instance contributes zero rate.
    AllTrials,
    /// Only trials the scheme itself solved.
    Feasible,
    /// Only trials every listed scheme solved.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
}

impl Sweep {
    /// Parses `axis=v1,v2,...`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (axis, values) = spec.split_once('=').ok_or_else(|| {
            Error::Config(format!("sweep must look like axis=v1,v2,..., got {spec:?}"))
        })?;
        let values = values
            .split(',')
            .map(|v| {
                v.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Config(format!("bad sweep value {v:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            axis: axis.trim().parse()?,
            values,
        })
    }
}

/// Full description of one experiment. Optional fields fall back to
/// per-mode defaults; see [`ExperimentConfig::sweep`] and friends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    /// Channel statistics; `channel.seed` is the master seed of the sweep.
    pub channel: ChannelConfig,
    /// Power budget in dB when not swept.
    pub p0_db: f64,
    /// Covertness budget in dB when not swept.
    pub eps_db: f64,
    /// Rate requirement in nats when not swept.
    pub r0: f64,
    pub sweep: Option<Sweep>,
    pub schemes: Option<Vec<Scheme>>,
    pub trials: Option<usize>,
    pub aggregation: Option<Aggregation>,
    pub penalty: PenaltyParams,
    /// Relative tolerance of every bisection.
    pub tol: f64,
    /// Training settings for on-the-fly networks when no checkpoint is given.
    pub train: Option<TrainConfig>,
    pub checkpoint: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::for_mode(Mode::NoncausalPower)
    }
}

impl ExperimentConfig {
    pub fn for_mode(mode: Mode) -> Self {
        Self {
            mode,
            channel: ChannelConfig::default(),
            p0_db: 5.0,
            eps_db: 0.0,
            r0: 3.0,
            sweep: None,
            schemes: None,
            trials: None,
            aggregation: None,
            penalty: PenaltyParams::default(),
            tol: 1e-12,
            train: None,
            checkpoint: None,
            output: None,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn sweep(&self) -> Sweep {
        self.sweep.clone().unwrap_or_else(|| match self.mode {
            Mode::NoncausalPower => Sweep {
                axis: SweepAxis::P0Db,
                values: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0],
            },
            Mode::CausalPower => Sweep {
                axis: SweepAxis::P0Db,
                values: vec![self.p0_db],
            },
            Mode::NoncausalRate | Mode::CausalRate => Sweep {
                axis: SweepAxis::R0,
                values: vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0],
            },
        })
    }

    pub fn schemes(&self) -> Vec<Scheme> {
        self.schemes.clone().unwrap_or_else(|| {
            if self.mode.is_causal() {
                vec![Scheme::Ddqn, Scheme::Average, Scheme::Trivial]
            } else {
                vec![Scheme::Proposed, Scheme::Convex, Scheme::Trivial]
            }
        })
    }

    pub fn trials(&self) -> usize {
        self.trials
            .unwrap_or(if self.mode.is_causal() { 1000 } else { 2000 })
    }

    pub fn aggregation(&self) -> Aggregation {
        self.aggregation.unwrap_or(if self.mode.is_rate() {
            Aggregation::Joint
        } else {
            Aggregation::AllTrials
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        self.train.clone().unwrap_or_default()
    }

    pub fn master_seed(&self) -> u64 {
        self.channel.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.channel.validate()?;
        self.penalty.validate()?;
        self.train_config().validate()?;
        if self.trials() == 0 {
            return config("trials must be at least 1");
        }
        let sweep = self.sweep();
        if sweep.values.is_empty() || sweep.values.iter().any(|v| !v.is_finite()) {
            return config("sweep values must be a nonempty list of finite numbers");
        }
        match (sweep.axis, self.mode.is_rate()) {
            (SweepAxis::R0, false) => return config("an r0 sweep needs a rate mode"),
            (SweepAxis::P0Db, true) => return config("a p0_db sweep needs a power mode"),
            _ => {}
        }
        let schemes = self.schemes();
        if schemes.is_empty() {
            return config("at least one scheme is required");
        }
        for (i, s) in schemes.iter().enumerate() {
            if !s.allowed_in(self.mode) {
                return config(format!(
                    "scheme {s} is not available in {:?} mode",
                    self.mode
                ));
            }
            if schemes[..i].contains(s) {
                return config(format!("scheme {s} listed twice"));
            }
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return config("tol must lie in (0, 1)");
        }
        for cell in self.cells()? {
            if !(cell.r0 > 0.0) && self.mode.is_rate() {
                return config("rate requirement must be positive");
            }
            if !(cell.p0 > 0.0 && cell.p0.is_finite() && cell.eps > 0.0 && cell.eps.is_finite()) {
                return config("power and covertness budgets must be positive and finite");
            }
        }
        Ok(())
    }

    fn cells(&self) -> Result<Vec<Cell>> {
        let sweep = self.sweep();
        sweep
            .values
            .iter()
            .enumerate()
            .map(|(index, &value)| {
                let mut channel = self.channel.clone();
                let (mut p0_db, mut eps_db, mut r0) = (self.p0_db, self.eps_db, self.r0);
                match sweep.axis {
                    SweepAxis::P0Db => p0_db = value,
                    SweepAxis::R0 => r0 = value,
                    SweepAxis::EpsDb => eps_db = value,
                    SweepAxis::SnrHDb => channel.snr_h_db = value,
                    SweepAxis::SnrGDb => channel.snr_g_db = value,
                }
                Ok(Cell {
                    index,
                    value,
                    model: ChannelModel::new(channel)?,
                    p0: db_to_linear(p0_db),
                    eps: db_to_linear(eps_db),
                    r0,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Cell {
    index: usize,
    value: f64,
    model: ChannelModel,
    p0: f64,
    eps: f64,
    r0: f64,
}

/// Seed of trial `trial`; shared by every sweep cell.
pub fn trial_seed(master: u64, trial: usize) -> u64 {
    splitmix(splitmix(master) ^ trial as u64)
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Channel realization of one trial.
pub fn trial_channel(model: &ChannelModel, master: u64, trial: usize) -> BlockSnrs {
    model.sample(&mut ChaCha8Rng::seed_from_u64(trial_seed(master, trial)))
}

/// One aggregated output line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sweep_axis: SweepAxis,
    pub sweep_value: f64,
    pub scheme: Scheme,
    /// Mean sum rate (nats) in power modes, mean total power in rate modes;
    /// NaN when no trial qualifies.
    pub mean_objective: f64,
    pub stderr: f64,
    pub feasibility_prob: f64,
    pub trials: usize,
}

/// Result of one scheme on one trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub scheme: Scheme,
    pub feasible: bool,
    pub objective: f64,
    /// Per-block transmit powers.
    pub powers: Vec<f64>,
}

/// Tally of constraint checks over every feasible allocation of a sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintAudit {
    pub allocations: u64,
    pub blocks: u64,
    pub violations: u64,
    /// Description of the first violation found, if any.
    pub first_violation: Option<String>,
}

impl ConstraintAudit {
    fn merge(&mut self, other: ConstraintAudit) {
        self.allocations += other.allocations;
        self.blocks += other.blocks;
        self.violations += other.violations;
        if self.first_violation.is_none() {
            self.first_violation = other.first_violation;
        }
    }

    fn flag(&mut self, what: String) {
        self.violations += 1;
        if self.first_violation.is_none() {
            self.first_violation = Some(what);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<ResultRow>,
    pub audit: ConstraintAudit,
    /// Per cell, per trial, the outcome of every scheme in listing order.
    #[serde(skip)]
    pub outcomes: Vec<Vec<Vec<TrialOutcome>>>,
}

/// Network and action grid shared by the causal schemes of one cell.
#[derive(Debug, Clone)]
struct CausalKit {
    net: Option<QNetwork>,
    grid: ActionGrid,
    mean_h: f64,
}

/// Budget a causal scheme works with in a cell: `P0` itself for power
/// allocation, the converted requirement for rate allocation.
fn causal_budget(mode: Mode, cell: &Cell) -> f64 {
    if mode.is_rate() {
        rate_to_power_budget(
            cell.r0,
            1,
            cell.model.config().num_blocks,
            cell.model.grid_h().mean(),
        )
    } else {
        cell.p0
    }
}

fn prepare_causal(
    cfg: &ExperimentConfig,
    cells: &[Cell],
    schemes: &[Scheme],
) -> Result<Vec<Option<CausalKit>>> {
    let needs_grid = schemes
        .iter()
        .any(|s| matches!(s, Scheme::Ddqn | Scheme::Average | Scheme::Trivial));
    if !cfg.mode.is_causal() || !needs_grid {
        return Ok(vec![None; cells.len()]);
    }
    let needs_net = schemes.contains(&Scheme::Ddqn);
    let checkpoint = match &cfg.checkpoint {
        Some(path) => Some(Checkpoint::load(path).map_err(|e| match e {
            Error::Io(io) => {
                Error::Config(format!("cannot read checkpoint {}: {io}", path.display()))
            }
            other => other,
        })?),
        None => None,
    };
    if let Some(ck) = &checkpoint {
        for cell in cells {
            let channel = cell.model.config();
            if ck.channel.num_blocks != channel.num_blocks {
                return config(format!(
                    "checkpoint was trained for {} blocks, experiment uses {}",
                    ck.channel.num_blocks, channel.num_blocks
                ));
            }
            if cfg.mode == Mode::CausalPower && (!same(ck.p0, cell.p0) || !same(ck.eps, cell.eps)) {
                return config(format!(
                    "checkpoint was trained for P0 = {} and eps = {}, cell {} uses P0 = {} and eps = {}",
                    ck.p0, ck.eps, cell.index, cell.p0, cell.eps
                ));
            }
        }
    }
    let train_cfg = cfg.train_config();
    cells
        .par_iter()
        .map(|cell| {
            let mean_h = cell.model.grid_h().mean();
            if let Some(ck) = &checkpoint {
                return Ok(Some(CausalKit {
                    net: Some(ck.network.clone()),
                    grid: ck.grid,
                    mean_h,
                }));
            }
            let budget = causal_budget(cfg.mode, cell);
            if needs_net {
                let out = train(&cell.model, budget, cell.eps, &train_cfg)?;
                Ok(Some(CausalKit {
                    net: Some(out.network),
                    grid: out.grid,
                    mean_h,
                }))
            } else {
                Ok(Some(CausalKit {
                    net: None,
                    grid: ActionGrid::spanning(budget, train_cfg.action_levels)?,
                    mean_h,
                }))
            }
        })
        .collect()
}

fn same(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn run_scheme(
    cfg: &ExperimentConfig,
    cell: &Cell,
    kit: Option<&CausalKit>,
    scheme: Scheme,
    snrs: &BlockSnrs,
) -> Result<TrialOutcome> {
    let tol = BisectionSpec::with_tol(cfg.tol);
    let power_result = |alloc: PowerAllocation, feasible: bool, objective: f64| TrialOutcome {
        scheme,
        feasible,
        objective,
        powers: alloc.0,
    };
    let rate_result = |alloc: RateAllocation, feasible: bool, objective: f64| TrialOutcome {
        scheme,
        feasible,
        objective: if feasible { objective } else { f64::NAN },
        powers: alloc
            .0
            .iter()
            .zip(&snrs.h)
            .map(|(r, h)| r.exp_m1() / h)
            .collect(),
    };
    let power_problem = || PowerProblem::new(snrs.clone(), cell.p0, cell.eps);
    let rate_problem = || RateProblem::new(snrs.clone(), cell.r0, cell.eps);

    Ok(match (cfg.mode.is_rate(), scheme, kit) {
        (false, Scheme::Proposed, _) => {
            let out = solve_noncausal_power(&power_problem()?, &cfg.penalty, tol)?;
            let feasible = out.is_feasible();
            power_result(out.allocation, feasible, out.objective)
        }
        (false, Scheme::Convex, _) => {
            let out = noncausal_power_convex_baseline(&power_problem()?, tol)?;
            let feasible = out.is_feasible();
            power_result(out.allocation, feasible, out.objective)
        }
        (false, Scheme::Trivial, None) => {
            let out = noncausal_power_trivial_baseline(&power_problem()?);
            let feasible = out.is_feasible();
            power_result(out.allocation, feasible, out.objective)
        }
        (true, Scheme::Proposed, _) => {
            let out = solve_noncausal_rate(&rate_problem()?, &cfg.penalty, tol, tol)?;
            let feasible = out.is_feasible();
            rate_result(out.allocation, feasible, out.objective)
        }
        (true, Scheme::Convex, _) => {
            let (_, out) = noncausal_rate_baselines(&rate_problem()?, tol, tol)?;
            let feasible = out.is_feasible();
            rate_result(out.allocation, feasible, out.objective)
        }
        (true, Scheme::Trivial, None) => {
            let (out, _) = noncausal_rate_baselines(&rate_problem()?, tol, tol)?;
            let feasible = out.is_feasible();
            rate_result(out.allocation, feasible, out.objective)
        }
        (false, Scheme::Ddqn | Scheme::Average | Scheme::Trivial, Some(kit)) => {
            let traj = match scheme {
                Scheme::Ddqn => greedy_rollout(
                    kit.net.as_ref().expect("network prepared"),
                    snrs,
                    cell.p0,
                    cell.eps,
                    &kit.grid,
                ),
                Scheme::Average => {
                    causal_average_power_rollout(snrs, cell.p0, cell.eps, &kit.grid, kit.mean_h)
                }
                _ => causal_trivial_power_rollout(snrs, cell.p0, cell.eps, &kit.grid),
            };
            power_result(traj.allocation, true, traj.sum_rate)
        }
        (true, Scheme::Ddqn | Scheme::Average | Scheme::Trivial, Some(kit)) => {
            let out = match scheme {
                Scheme::Ddqn => causal_rate_rollout(
                    kit.net.as_ref().expect("network prepared"),
                    snrs,
                    cell.r0,
                    cell.eps,
                    &kit.grid,
                    kit.mean_h,
                ),
                Scheme::Average => {
                    causal_average_rate(snrs, cell.r0, cell.eps, &kit.grid, kit.mean_h)
                }
                _ => causal_trivial_rate(snrs, cell.r0, cell.eps, &kit.grid, kit.mean_h),
            };
            let feasible = out.is_feasible();
            rate_result(out.allocation, feasible, out.objective)
        }
        (_, s, _) => {
            return config(format!(
                "scheme {s} is not available in {:?} mode",
                cfg.mode
            ))
        }
    })
}

fn audit_outcome(
    mode: Mode,
    cell: &Cell,
    snrs: &BlockSnrs,
    out: &TrialOutcome,
    audit: &mut ConstraintAudit,
) {
    if !out.feasible {
        return;
    }
    audit.allocations += 1;
    audit.blocks += out.powers.len() as u64;
    let p = &out.powers;
    let tag = |what: &str| format!("{} cell {}: {what}", out.scheme, cell.index);
    // grid allocations are checked exactly; continuous ones get a tiny slack
    let cov_slack = if mode.is_causal()
        && !mode.is_rate()
        && matches!(out.scheme, Scheme::Ddqn | Scheme::Average | Scheme::Trivial)
    {
        0.0
    } else {
        1e-9
    };
    for (l, (&pl, &g)) in p.iter().zip(&snrs.g).enumerate() {
        if !(pl >= 0.0) {
            audit.flag(tag(&format!("negative power {pl} in block {l}")));
        }
        if g * pl > cell.eps + cov_slack {
            audit.flag(tag(&format!(
                "block {l} leaks g P = {} > eps = {}",
                g * pl,
                cell.eps
            )));
        }
    }
    if !mode.is_rate() {
        let total: f64 = p.iter().sum();
        if total > cell.p0 + 1e-9 {
            audit.flag(tag(&format!("total power {total} exceeds {}", cell.p0)));
        }
    } else {
        let rate: f64 = p.iter().zip(&snrs.h).map(|(p, h)| (p * h).ln_1p()).sum();
        if rate < cell.r0 - 1e-9 {
            audit.flag(tag(&format!(
                "sum rate {rate} misses requirement {}",
                cell.r0
            )));
        }
    }
    let sequential =
        mode.is_causal() && matches!(out.scheme, Scheme::Ddqn | Scheme::Average | Scheme::Trivial);
    if sequential {
        let mut margin = 0.0;
        for (l, &pl) in p.iter().enumerate() {
            margin += margin_gain(pl, snrs.h[l], snrs.g[l]);
            if margin < -1e-12 {
                audit.flag(tag(&format!("running margin {margin} after block {l}")));
                break;
            }
        }
    } else {
        let margin = delta_power(p, snrs);
        if margin < -MARGIN_SLACK {
            audit.flag(tag(&format!("less-noisy margin {margin}")));
        }
    }
}

fn aggregate(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    cell: &Cell,
    schemes: &[Scheme],
    trials: &[Vec<TrialOutcome>],
) -> Vec<ResultRow> {
    let mut agg = cfg.aggregation();
    if agg == Aggregation::AllTrials && cfg.mode.is_rate() {
        // an unmet requirement has no power to average
        agg = Aggregation::Feasible;
    }
    let n = trials.len();
    schemes
        .iter()
        .enumerate()
        .map(|(k, &scheme)| {
            let feasible = trials.iter().filter(|t| t[k].feasible).count();
            let values: Vec<f64> = trials
                .iter()
                .filter(|t| match agg {
                    Aggregation::AllTrials => true,
                    Aggregation::Feasible => t[k].feasible,
                    Aggregation::Joint => t.iter().all(|o| o.feasible),
                })
                .map(|t| t[k].objective)
                .collect();
            let (mean_objective, stderr) = mean_and_stderr(&values);
            ResultRow {
                sweep_axis: axis,
                sweep_value: cell.value,
                scheme,
                mean_objective,
                stderr,
                feasibility_prob: feasible as f64 / n as f64,
                trials: n,
            }
        })
        .collect()
}

/// Sample mean and standard error; NaN where undefined.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Runs the whole experiment.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let cells = cfg.cells()?;
    let schemes = cfg.schemes();
    let axis = cfg.sweep().axis;
    let trials = cfg.trials();
    let master = cfg.master_seed();
    let kits = prepare_causal(cfg, &cells, &schemes)?;

    let mut rows = Vec::with_capacity(cells.len() * schemes.len());
    let mut audit = ConstraintAudit::default();
    let mut outcomes = Vec::with_capacity(cells.len());
    for (cell, kit) in cells.iter().zip(&kits) {
        let per_trial: Vec<(Vec<TrialOutcome>, ConstraintAudit)> = (0..trials)
            .into_par_iter()
            .map(|t| {
                let snrs = trial_channel(&cell.model, master, t);
                let mut local = ConstraintAudit::default();
                let outs = schemes
                    .iter()
                    .map(|&s| {
                        let out = run_scheme(cfg, cell, kit.as_ref(), s, &snrs)?;
                        audit_outcome(cfg.mode, cell, &snrs, &out, &mut local);
                        Ok(out)
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok((outs, local))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cell_outcomes = Vec::with_capacity(trials);
        for (outs, local) in per_trial {
            audit.merge(local);
            cell_outcomes.push(outs);
        }
        rows.extend(aggregate(cfg, axis, cell, &schemes, &cell_outcomes));
        outcomes.push(cell_outcomes);
    }
    Ok(SweepReport {
        rows,
        audit,
        outcomes,
    })
}

pub const CSV_HEADER: &str =
    "sweep_axis,sweep_value,scheme,mean_objective,stderr,feasibility_prob,trials";

/// Formats `x` with at most nine significant digits, trailing zeros removed.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-5..9).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub fn write_csv<W: Write>(rows: &[ResultRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.sweep_axis,
            format_sig9(r.sweep_value),
            r.scheme,
            format_sig9(r.mean_objective),
            format_sig9(r.stderr),
            format_sig9(r.feasibility_prob),
            r.trials
        )?;
    }
    Ok(())
}

pub fn csv_string(rows: &[ResultRow]) -> String {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

const MAX_ORACLE_BLOCKS: usize = 4;
const MAX_ORACLE_POINTS: usize = 21;

fn check_oracle_size(blocks: usize, points: usize) -> Result<()> {
    if blocks > MAX_ORACLE_BLOCKS || !(2..=MAX_ORACLE_POINTS).contains(&points) {
        return config(format!(
            "brute force is limited to {MAX_ORACLE_BLOCKS} blocks and 2..={MAX_ORACLE_POINTS} points per block"
        ));
    }
    Ok(())
}

/// Visits every index vector of `blocks` entries in `0..points`.
fn for_each_grid_point(blocks: usize, points: usize, mut visit: impl FnMut(&[usize])) {
    let mut idx = vec![0usize; blocks];
    loop {
        visit(&idx);
        let mut k = 0;
        loop {
            if k == blocks {
                return;
            }
            idx[k] += 1;
            if idx[k] < points {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Best sum rate over a uniform grid of `points` powers per block in
/// `[0, min(eps/g, P0)]`, keeping only points that meet every constraint.
/// The zero allocation always qualifies, so an instance without any usable
/// block yields zeros.
pub fn brute_force_power_oracle(problem: &PowerProblem, points: usize) -> Result<PowerAllocation> {
    let snrs = &problem.snrs;
    check_oracle_size(snrs.len(), points)?;
    let tops: Vec<f64> = problem.caps().iter().map(|c| c.min(problem.p0)).collect();
    let mut best = vec![0.0; snrs.len()];
    let mut best_rate = 0.0;
    let mut p = vec![0.0; snrs.len()];
    for_each_grid_point(snrs.len(), points, |idx| {
        for ((x, &i), top) in p.iter_mut().zip(idx).zip(&tops) {
            *x = top * i as f64 / (points - 1) as f64;
        }
        if p.iter().sum::<f64>() <= problem.p0 && delta_power(&p, snrs) >= 0.0 {
            let rate = sum_rate(&p, snrs);
            if rate > best_rate {
                best_rate = rate;
                best.copy_from_slice(&p);
            }
        }
    });
    Ok(PowerAllocation(best))
}

/// Least total power over a uniform grid of `points` rates per block in
/// `[0, ln(1 + eps h/g)]`, plus every grid point on the leading blocks
/// completed by the exact missing rate on the last block. `None` when no
/// candidate meets the requirement and the less-noisy constraint.
pub fn brute_force_rate_oracle(
    problem: &RateProblem,
    points: usize,
) -> Result<Option<RateAllocation>> {
    let snrs = &problem.snrs;
    let blocks = snrs.len();
    check_oracle_size(blocks, points)?;
    let caps = problem.caps();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |r: &[f64]| {
        if r.iter().sum::<f64>() >= problem.r0 && delta_rate(r, snrs) >= 0.0 {
            let power = total_power(r, snrs);
            if best.as_ref().is_none_or(|(p, _)| power < *p) {
                best = Some((power, r.to_vec()));
            }
        }
    };
    let mut r = vec![0.0; blocks];
    for_each_grid_point(blocks, points, |idx| {
        for ((x, &i), cap) in r.iter_mut().zip(idx).zip(&caps) {
            *x = cap * i as f64 / (points - 1) as f64;
        }
        consider(&r);
        let lead: f64 = r[..blocks - 1].iter().sum();
        let missing = (problem.r0 - lead).max(0.0);
        if missing <= caps[blocks - 1] {
            let saved = r[blocks - 1];
            r[blocks - 1] = missing;
            consider(&r);
            r[blocks - 1] = saved;
        }
    });
    Ok(best.map(|(_, r)| RateAllocation(r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-2.5), "-2.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567891.0), "1.23456789e9");
        assert_eq!(format_sig9(2.0f64.ln()), "0.693147181");
        assert_eq!(format_sig9(1.5e-7), "1.5e-7");
        assert_eq!(format_sig9(0.00012345), "0.00012345");
        assert_eq!(format_sig9(f64::NAN), "NaN");
        assert_eq!(format_sig9(9.9999999999), "10");
    }

    #[test]
    fn trial_seeds_differ_across_trials_and_masters() {
        let a = trial_seed(1, 0);
        assert_ne!(a, trial_seed(1, 1));
        assert_ne!(a, trial_seed(2, 0));
        assert_eq!(a, trial_seed(1, 0));
    }

    #[test]
    fn sweep_parsing() {
        let s = Sweep::parse("p0_db=0,2.5, 5").unwrap();
        assert_eq!(s.axis, SweepAxis::P0Db);
        assert_eq!(s.values, vec![0.0, 2.5, 5.0]);
        assert!(Sweep::parse("nope=1").is_err());
        assert!(Sweep::parse("r0").is_err());
        assert!(Sweep::parse("r0=a").is_err());
    }

    #[test]
    fn scheme_ids_round_trip() {
        for s in [
            Scheme::Proposed,
            Scheme::Convex,
            Scheme::Trivial,
            Scheme::Ddqn,
            Scheme::Average,
        ] {
            assert_eq!(s.as_str().parse::<Scheme>().unwrap(), s);
        }
        assert!("best".parse::<Scheme>().is_err());
    }

    #[test]
    fn config_validation_catches_mismatches() {
        let mut cfg = ExperimentConfig::for_mode(Mode::NoncausalPower);
        cfg.validate().unwrap();
        cfg.schemes = Some(vec![Scheme::Ddqn]);
        assert!(cfg.validate().is_err());
        cfg.schemes = Some(vec![Scheme::Proposed, Scheme::Proposed]);
        assert!(cfg.validate().is_err());
        cfg.schemes = None;
        cfg.sweep = Some(Sweep {
            axis: SweepAxis::R0,
            values: vec![1.0],
        });
        assert!(cfg.validate().is_err());
        cfg.sweep = Some(Sweep {
            axis: SweepAxis::P0Db,
            values: vec![],
        });
        assert!(cfg.validate().is_err());
        cfg.sweep = None;
        cfg.trials = Some(0);
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn toml_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            r#"
            mode = "noncausal_rate"
            trials = 10
            schemes = ["proposed", "trivial"]
            [channel]
            snr_h_db = 5.0
            snr_g_db = 3.0
            seed = 7
            [sweep]
            axis = "r0"
            values = [1.0, 2.0]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.mode, Mode::NoncausalRate);
        assert_eq!(cfg.trials(), 10);
        assert_eq!(cfg.master_seed(), 7);
        assert_eq!(cfg.aggregation(), Aggregation::Joint);
        assert_eq!(cfg.penalty, PenaltyParams::default());
        assert!(ExperimentConfig::from_toml_str("mode = \"noncausal_power\"\nbogus = 1").is_err());
    }

    #[test]
    fn missing_checkpoint_is_a_config_error() {
        let mut cfg = ExperimentConfig::for_mode(Mode::CausalPower);
        cfg.checkpoint = Some("/definitely/not/here.ckpt".into());
        cfg.trials = Some(1);
        assert!(matches!(run_sweep(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn statistics_helpers() {
        let (m, s) = mean_and_stderr(&[]);
        assert!(m.is_nan() && s.is_nan());
        let (m, s) = mean_and_stderr(&[2.0]);
        assert_eq!(m, 2.0);
        assert!(s.is_nan());
        let (m, s) = mean_and_stderr(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    fn snrs(h: &[f64], g: &[f64]) -> BlockSnrs {
        BlockSnrs::new(h.to_vec(), g.to_vec()).unwrap()
    }

    #[test]
    fn power_oracle_single_block() {
        let pr = PowerProblem::new(snrs(&[3.0], &[2.0]), 2.0, 1.0).unwrap();
        let best = brute_force_power_oracle(&pr, 21).unwrap();
        assert!((best.0[0] - 0.5).abs() < 1e-15);
        let pr = PowerProblem::new(snrs(&[3.0], &[0.1]), 2.0, 1.0).unwrap();
        assert!((brute_force_power_oracle(&pr, 21).unwrap().0[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn power_oracle_infeasible_instance_is_zero() {
        let pr = PowerProblem::new(snrs(&[1.0, 1.0], &[2.0, 3.0]), 2.0, 1.0).unwrap();
        assert_eq!(brute_force_power_oracle(&pr, 11).unwrap().0, vec![0.0, 0.0]);
        let pr = PowerProblem::new(snrs(&[1.0; 5], &[2.0; 5]), 2.0, 1.0).unwrap();
        assert!(brute_force_power_oracle(&pr, 11).is_err());
    }

    #[test]
    fn rate_oracle_single_block() {
        let pr = RateProblem::new(snrs(&[3.0], &[1.0]), 1.0, 1.0).unwrap();
        let r = brute_force_rate_oracle(&pr, 21).unwrap().unwrap();
        assert_eq!(r.0, vec![1.0]);
        // requirement above ln(1 + 3) = 1.386
        let pr = RateProblem::new(snrs(&[3.0], &[1.0]), 1.5, 1.0).unwrap();
        assert!(brute_force_rate_oracle(&pr, 21).unwrap().is_none());
        let pr = RateProblem::new(snrs(&[1.0], &[3.0]), 0.1, 1.0).unwrap();
        assert!(brute_force_rate_oracle(&pr, 21).unwrap().is_none());
    }

    #[test]
    fn small_sweep_rows_and_determinism() {
        let mut cfg = ExperimentConfig::for_mode(Mode::NoncausalPower);
        cfg.channel.num_blocks = 3;
        cfg.trials = Some(20);
        cfg.sweep = Some(Sweep {
            axis: SweepAxis::P0Db,
            values: vec![0.0, 5.0],
        });
        let a = run_sweep(&cfg).unwrap();
        assert_eq!(a.rows.len(), 2 * 3);
        assert_eq!(a.audit.violations, 0, "{:?}", a.audit.first_violation);
        let b = run_sweep(&cfg).unwrap();
        assert_eq!(csv_string(&a.rows), csv_string(&b.rows));
        for row in &a.rows {
            let count = (row.feasibility_prob * row.trials as f64).round();
            assert_eq!(count / row.trials as f64, row.feasibility_prob);
        }
    }
}
