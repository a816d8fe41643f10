use serde::{Deserialize, Serialize};

/// Slack accepted on the less-noisy margin of a feasible output.
pub const MARGIN_SLACK: f64 = 1e-8;

/// Which step of a solver produced an allocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    /// The convex relaxation's KKT point already meets the less-noisy constraint.
    OptimalConvex,
    /// Penalized projected gradient ascent (power problem) found a feasible point.
    PgaFeasible,
    /// Penalized projected gradient descent (rate problem) found a feasible point.
    PgdFeasible,
    /// The closed-form scaled allocation on blocks with `h >= g` was returned.
    TrivialFallback,
    /// Produced block by block from causal channel knowledge.
    Sequential,
    /// Provably infeasible (screening test fired).
    Infeasible,
    /// No feasible allocation was found, although one may exist.
    DeclaredInfeasible,
}

impl Status {
    pub fn is_feasible(self) -> bool {
        !matches!(self, Status::Infeasible | Status::DeclaredInfeasible)
    }
}

/// Result of an allocator run.
///
/// `objective` is the sum covert rate in nats for power allocation and the
/// total transmit power for rate allocation. `margin` is the less-noisy margin
/// of the returned allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AllocationOutcome<A> {
    pub allocation: A,
    pub status: Status,
    pub objective: f64,
    pub margin: f64,
    /// Gradient iterations spent (zero for closed-form steps).
    pub iterations: usize,
}

impl<A> AllocationOutcome<A> {
    pub fn is_feasible(&self) -> bool {
        self.status.is_feasible()
    }
}
