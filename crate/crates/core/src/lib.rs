//! Continuous-time Markov chains for queueing models.
//!
//! The crate builds transition-rate functions for Markovian queueing models
//! (birth-death queues, batch-service queues, symmetric queues, self-reacting
//! systems with batch movements, and networks of reacting nodes), constructs
//! their time reversals with respect to reference measures, and checks the
//! hierarchy of balance notions that sits between detailed balance and
//! quasi-reversibility. Stationary distributions come from closed forms where
//! the model class has one and from a numerical solver otherwise, and an
//! event-driven simulator validates Poisson departure claims empirically.
//!
//! Rates follow the extended convention in which a self-loop rate
//! `q(x, x) >= 0` is allowed and counts toward the exit rate `a(x)`. Dummy
//! transitions of this kind carry real modeling content (for example blocked
//! arrivals at a full node), and the simulator generates and records them.

pub mod balance;
pub mod ctmc;
pub mod models;
pub mod network;
pub mod report;
pub mod reversal;
pub mod sim;
pub mod spec;

pub use balance::{Label, SubTransitionFamily};
pub use ctmc::{Measure, RateMatrix, SolverOptions, State, StateSpace};

/// Scale-free closeness test used by every balance checker in the crate:
/// `|a - b| <= tol * max(1, |a|, |b|)`.
///
/// The `max(1, ..)` floor makes the comparison absolute for quantities much
/// smaller than one, which is what keeps negligible truncation leakage at the
/// edge of a state-space box from drowning out a genuine balance failure.
pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

/// Residual of the comparison performed by [`close`], i.e. the scaled gap
/// `|a - b| / max(1, |a|, |b|)`.
pub fn residual(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}
