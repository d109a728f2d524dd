//! Builders for the concrete model classes: birth-death queues, batch
//! service, reacting systems, symmetric queues, and self-reacting systems
//! with balanced departures.

mod markovian;
mod self_reacting;
mod symmetric;

pub use markovian::{
    build_batch_service, build_birth_death, build_mm1, build_mms, build_reacting_system,
    DepartureCounting, ReactingSystemSpec,
};
pub use self_reacting::{
    balanced_departure_rates, build_batch_movement_network, build_self_reacting, build_whittle,
    reversed_routing, routing_invariant, self_reacting_stationary, theorem2_report,
    BatchMovementSpec, Routing, RoutingInvariant, SelfReactingSpec, Theorem2Report, WhittleSpec,
};
pub use symmetric::{
    build_symmetric_queue, check_symmetric, erlang_type, position_sequence, CustomerType,
    Discipline, SymmetricQueueParams,
};

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::balance::{BalanceError, Label, SubTransitionFamily};
use crate::ctmc::{CtmcError, Measure, RateMatrix, StateSpace};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("rate must be positive: {name} = {value}")]
    NonPositiveRate { name: String, value: f64 },
    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),
    #[error("arrival kernel row {row} of type {ty} sums to {sum}, not 1")]
    KernelNotStochastic { ty: String, row: usize, sum: f64 },
    #[error("routing row {row} sums to {sum}, not 1")]
    RoutingNotStochastic { row: usize, sum: f64 },
    #[error("service discipline is not symmetric: phi({n}) delta({l},{n}) != gamma({l},{n})")]
    SymmetryViolated { l: usize, n: usize },
    #[error("state space too large: {0} states (limit {1})")]
    StateSpaceTooLarge(usize, usize),
    #[error("phi must be positive everywhere (state {0})")]
    ZeroPhi(usize),
    #[error("type {0} has zero weight but positive routed mass")]
    ZeroWeightType(usize),
    #[error("routing does not conserve batch size: |{0:?}| != |{1:?}|")]
    BatchSizeNotConserved(Vec<u32>, Vec<u32>),
    #[error("internal transitions are not self-dual under the candidate measure at ({0}, {1})")]
    E4Violated(usize, usize),
    #[error("arrival consistency identity fails at state {state}: {lhs} vs {rhs}")]
    ArrivalConsistencyFailed { state: usize, lhs: f64, rhs: f64 },
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

/// A built model: generator, labeled event family, closed-form stationary
/// measure where the class has one, and named parameters.
pub struct QueueModel {
    space: Arc<StateSpace>,
    family: SubTransitionFamily,
    pub closed_form_pi: Option<Measure>,
    pub params: BTreeMap<String, f64>,
    /// States whose balance identities are corrupted by truncation of an
    /// infinite model (e.g. the top layer of a box). Balance checkers
    /// should skip them via [`interior_mask`].
    ///
    /// [`interior_mask`]: QueueModel::interior_mask
    pub boundary: Vec<bool>,
}

impl QueueModel {
    pub fn new(space: Arc<StateSpace>, family: SubTransitionFamily) -> QueueModel {
        let n = space.len();
        QueueModel {
            space,
            family,
            closed_form_pi: None,
            params: BTreeMap::new(),
            boundary: vec![false; n],
        }
    }

    pub fn with_closed_form(mut self, pi: Measure) -> QueueModel {
        self.closed_form_pi = Some(pi);
        self
    }

    pub fn with_param(mut self, name: &str, value: f64) -> QueueModel {
        self.params.insert(name.to_string(), value);
        self
    }

    pub fn with_boundary(mut self, boundary: Vec<bool>) -> QueueModel {
        assert_eq!(boundary.len(), self.space.len());
        self.boundary = boundary;
        self
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn q(&self) -> &RateMatrix {
        self.family.parent()
    }

    pub fn family(&self) -> &SubTransitionFamily {
        &self.family
    }

    /// Departure parts of the family (labels `d` or `d:type`).
    pub fn departure_parts(&self) -> BTreeMap<&Label, &RateMatrix> {
        self.family
            .parts()
            .iter()
            .filter(|(l, _)| l.as_str() == "d" || l.as_str().starts_with("d:"))
            .collect()
    }

    /// Sum of all departure parts into one counting rate function.
    pub fn total_departures(&self) -> RateMatrix {
        let mut total = RateMatrix::zeros(self.space.clone());
        for part in self.departure_parts().values() {
            total.add_matrix(part);
        }
        total
    }

    /// Mask selecting the states unaffected by truncation, or `None` when
    /// every state is exact.
    pub fn interior_mask(&self) -> Option<Vec<bool>> {
        if self.boundary.iter().any(|&b| b) {
            Some(self.boundary.iter().map(|&b| !b).collect())
        } else {
            None
        }
    }

    pub fn solve(&self, opts: &crate::ctmc::SolverOptions) -> Result<Measure, CtmcError> {
        crate::ctmc::stationary_distribution(self.q(), opts)
    }
}

/// A sparse probability kernel `p(y, x')`. Unlike [`crate::ctmc::Dtmc`],
/// rows are allowed to be empty: builders of truncated models only populate
/// the rows that can actually be reached, and stochasticity of the used rows
/// is enforced at assembly time.
#[derive(Clone, Debug)]
pub struct Kernel {
    space: Arc<StateSpace>,
    rows: Vec<BTreeMap<usize, f64>>,
}

impl Kernel {
    pub fn zeros(space: Arc<StateSpace>) -> Kernel {
        let n = space.len();
        Kernel { space, rows: vec![BTreeMap::new(); n] }
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn add(&mut self, y: usize, x: usize, p: f64) {
        assert!((0.0..=1.0 + 1e-12).contains(&p), "probability out of range: {p}");
        if p > 0.0 {
            *self.rows[y].entry(x).or_insert(0.0) += p;
        }
    }

    pub fn prob(&self, y: usize, x: usize) -> f64 {
        self.rows[y].get(&x).copied().unwrap_or(0.0)
    }

    pub fn row(&self, y: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[y].iter().map(|(&x, &p)| (x, p))
    }

    pub fn row_sum(&self, y: usize) -> f64 {
        self.rows[y].values().sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(y, row)| row.iter().map(move |(&x, &p)| (y, x, p)))
    }

    /// Scales every entry by `c` into a rate function.
    pub fn scaled(&self, c: f64) -> RateMatrix {
        let mut out = RateMatrix::zeros(self.space.clone());
        for (y, x, p) in self.entries() {
            out.add(y, x, c * p);
        }
        out
    }
}
