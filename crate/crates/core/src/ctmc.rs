//! State spaces, transition-rate functions, and the stationary solver.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CtmcError {
    #[error("state space is empty")]
    EmptySpace,
    #[error("duplicate state in enumeration: {0}")]
    DuplicateState(String),
    #[error("state {0} has wrong dimension (expected {1})")]
    DimensionMismatch(String, usize),
    #[error("sizes do not match: {0} vs {1}")]
    SizeMismatch(usize, usize),
    #[error("negative or non-finite value: {0}")]
    BadValue(f64),
    #[error("chain is not irreducible")]
    NotIrreducible,
    #[error("solver did not converge (residual {residual:.3e} after {iterations} iterations)")]
    SolverDidNotConverge { residual: f64, iterations: usize },
    #[error("row {row} of a stochastic matrix sums to {sum}, not 1")]
    RowNotStochastic { row: usize, sum: f64 },
    #[error("state {0} has zero weight but positive incoming probability")]
    UnsupportedState(usize),
    #[error("measure has zero total mass")]
    ZeroTotalMass,
    #[error("state not found in space: {0}")]
    UnknownState(String),
}

/// A point of a state space: a fixed-length vector of nonnegative integer
/// coordinates. Composite states (e.g. symmetric-queue position sequences)
/// are encoded into coordinates by their builders.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct State(pub Vec<u32>);

impl State {
    pub fn coords(&self) -> &[u32] {
        &self.0
    }
}

impl fmt::Debug for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self}")
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (k, c) in self.0.iter().enumerate() {
            if k > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")
    }
}

/// Inclusive upper bounds of a box truncation, one per dimension.
#[derive(Clone, Debug)]
pub struct Truncation {
    pub bounds: Vec<u32>,
}

/// A finite enumerated state space with a dense index bijection.
///
/// Enumeration order is part of the contract: box spaces are enumerated
/// lexicographically so indices are reproducible across runs.
pub struct StateSpace {
    dim: usize,
    states: Vec<State>,
    index: HashMap<State, usize>,
    truncation: Option<Truncation>,
}

impl fmt::Debug for StateSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "StateSpace(dim={}, states={})", self.dim, self.states.len())
    }
}

impl StateSpace {
    /// All states of the box `0..=bounds[k]` per dimension, lexicographic.
    pub fn enumerate_box(bounds: &[u32]) -> Arc<StateSpace> {
        let dim = bounds.len();
        let mut states = Vec::new();
        let mut cur = vec![0u32; dim];
        loop {
            states.push(State(cur.clone()));
            // lexicographic increment with per-dimension carry
            let mut k = dim;
            loop {
                if k == 0 {
                    let index = states
                        .iter()
                        .enumerate()
                        .map(|(i, s)| (s.clone(), i))
                        .collect();
                    return Arc::new(StateSpace {
                        dim,
                        states,
                        index,
                        truncation: Some(Truncation { bounds: bounds.to_vec() }),
                    });
                }
                k -= 1;
                if cur[k] < bounds[k] {
                    cur[k] += 1;
                    break;
                }
                cur[k] = 0;
            }
        }
    }

    /// The one-point space with no coordinates (used for external sources).
    pub fn singleton() -> Arc<StateSpace> {
        let s = State(Vec::new());
        Arc::new(StateSpace {
            dim: 0,
            states: vec![s.clone()],
            index: HashMap::from([(s, 0)]),
            truncation: None,
        })
    }

    /// A space from an explicit enumeration. Fails on duplicates or on a
    /// state of the wrong dimension.
    pub fn from_states(dim: usize, states: Vec<State>) -> Result<Arc<StateSpace>, CtmcError> {
        if states.is_empty() {
            return Err(CtmcError::EmptySpace);
        }
        let mut index = HashMap::with_capacity(states.len());
        for (i, s) in states.iter().enumerate() {
            if s.0.len() != dim {
                return Err(CtmcError::DimensionMismatch(s.to_string(), dim));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(CtmcError::DuplicateState(s.to_string()));
            }
        }
        Ok(Arc::new(StateSpace { dim, states, index, truncation: None }))
    }

    /// Product space with concatenated coordinates, enumerated with the last
    /// factor varying fastest (consistent with [`enumerate_box`]).
    ///
    /// [`enumerate_box`]: StateSpace::enumerate_box
    pub fn product(factors: &[Arc<StateSpace>]) -> Arc<StateSpace> {
        let dim = factors.iter().map(|s| s.dim).sum();
        let mut states: Vec<State> = vec![State(Vec::with_capacity(dim))];
        for f in factors {
            let mut next = Vec::with_capacity(states.len() * f.len());
            for prefix in &states {
                for s in &f.states {
                    let mut c = prefix.0.clone();
                    c.extend_from_slice(&s.0);
                    next.push(State(c));
                }
            }
            states = next;
        }
        let index = states.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Arc::new(StateSpace { dim, states, index, truncation: None })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn state(&self, i: usize) -> &State {
        &self.states[i]
    }

    pub fn states(&self) -> &[State] {
        &self.states
    }

    pub fn index_of(&self, s: &State) -> Option<usize> {
        self.index.get(s).copied()
    }

    pub fn require_index(&self, s: &State) -> Result<usize, CtmcError> {
        self.index_of(s).ok_or_else(|| CtmcError::UnknownState(s.to_string()))
    }

    pub fn truncation(&self) -> Option<&Truncation> {
        self.truncation.as_ref()
    }
}

/// A transition-rate function on a finite state space, stored sparsely by
/// row. Self-loop entries `(i, i)` are permitted and count toward the exit
/// rate. `dropped` records rate mass of transitions that left a truncation
/// box and were discarded by a builder, so tests can bound truncation error.
#[derive(Clone)]
pub struct RateMatrix {
    space: Arc<StateSpace>,
    rows: Vec<BTreeMap<usize, f64>>,
    dropped: Vec<f64>,
}

impl fmt::Debug for RateMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "RateMatrix(n={}, nnz={})", self.len(), self.nnz())
    }
}

impl RateMatrix {
    pub fn zeros(space: Arc<StateSpace>) -> RateMatrix {
        let n = space.len();
        RateMatrix { space, rows: vec![BTreeMap::new(); n], dropped: vec![0.0; n] }
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

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(|r| r.len()).sum()
    }

    /// Accumulates `rate` onto entry `(i, j)`. Zero rates are ignored.
    pub fn add(&mut self, i: usize, j: usize, rate: f64) {
        assert!(rate.is_finite() && rate >= 0.0, "rate must be finite and >= 0, got {rate}");
        if rate > 0.0 {
            *self.rows[i].entry(j).or_insert(0.0) += rate;
        }
    }

    /// Records rate mass leaving the truncation box from state `i`.
    pub fn drop_rate(&mut self, i: usize, rate: f64) {
        assert!(rate.is_finite() && rate >= 0.0);
        self.dropped[i] += rate;
    }

    pub fn rate(&self, i: usize, j: usize) -> f64 {
        self.rows[i].get(&j).copied().unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[i].iter().map(|(&j, &r)| (j, r))
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |(&j, &r)| (i, j, r)))
    }

    pub fn dropped(&self) -> &[f64] {
        &self.dropped
    }

    pub fn total_dropped(&self) -> f64 {
        self.dropped.iter().sum()
    }

    /// Exit rates `a(i)`: full row sums including self-loops.
    pub fn exit_rates(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.values().sum()).collect()
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.rows[i].values().sum()
    }

    /// Elementwise sum of two rate functions on the same space.
    pub fn add_matrix(&mut self, other: &RateMatrix) {
        assert_eq!(self.len(), other.len());
        for (i, j, r) in other.entries() {
            self.add(i, j, r);
        }
        for (i, d) in other.dropped.iter().enumerate() {
            self.dropped[i] += d;
        }
    }

    pub fn transpose(&self) -> RateMatrix {
        let mut t = RateMatrix::zeros(self.space.clone());
        for (i, j, r) in self.entries() {
            t.add(j, i, r);
        }
        t
    }

    pub fn without_self_loops(&self) -> RateMatrix {
        let mut out = RateMatrix::zeros(self.space.clone());
        for (i, j, r) in self.entries() {
            if i != j {
                out.add(i, j, r);
            }
        }
        out
    }

    pub fn max_abs_diff(&self, other: &RateMatrix) -> f64 {
        assert_eq!(self.len(), other.len());
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            for (j, r) in self.row(i) {
                worst = worst.max((r - other.rate(i, j)).abs());
            }
            for (j, r) in other.row(i) {
                worst = worst.max((r - self.rate(i, j)).abs());
            }
        }
        worst
    }

    /// Largest relative entry difference, scaled by `max(1, |a|, |b|)`.
    pub fn max_rel_diff(&self, other: &RateMatrix) -> f64 {
        assert_eq!(self.len(), other.len());
        let mut worst = 0.0f64;
        for i in 0..self.len() {
            for (j, r) in self.row(i) {
                worst = worst.max(crate::residual(r, other.rate(i, j)));
            }
            for (j, r) in other.row(i) {
                worst = worst.max(crate::residual(r, self.rate(i, j)));
            }
        }
        worst
    }

    /// True iff every ordered pair of distinct states is connected by a
    /// directed path of positive rates. Self-loops are ignored.
    pub fn is_irreducible(&self) -> bool {
        let n = self.len();
        if n == 0 {
            return false;
        }
        if n == 1 {
            return true;
        }
        let forward =
            |i: usize| self.rows[i].iter().filter(move |&(&j, _)| j != i).map(|(&j, _)| j);
        if !reaches_all(n, forward) {
            return false;
        }
        let t = self.transpose();
        let backward =
            |i: usize| t.rows[i].iter().filter(move |&(&j, _)| j != i).map(|(&j, _)| j);
        reaches_all(n, backward)
    }
}

fn reaches_all<'a, I, F>(n: usize, neighbors: F) -> bool
where
    I: Iterator<Item = usize> + 'a,
    F: Fn(usize) -> I,
{
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut count = 1;
    while let Some(i) = stack.pop() {
        for j in neighbors(i) {
            if !seen[j] {
                seen[j] = true;
                count += 1;
                stack.push(j);
            }
        }
    }
    count == n
}

/// A nonnegative weight per state. Serves as stationary distribution,
/// unnormalized stationary measure, or supporting/reference measure
/// depending on context; `normalized` records which.
#[derive(Clone)]
pub struct Measure {
    space: Arc<StateSpace>,
    weights: Vec<f64>,
    normalized: bool,
}

impl fmt::Debug for Measure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Measure(n={}, normalized={})", self.weights.len(), self.normalized)
    }
}

impl Measure {
    pub fn new(space: Arc<StateSpace>, weights: Vec<f64>) -> Result<Measure, CtmcError> {
        if weights.len() != space.len() {
            return Err(CtmcError::SizeMismatch(weights.len(), space.len()));
        }
        for &w in &weights {
            if !w.is_finite() || w < 0.0 {
                return Err(CtmcError::BadValue(w));
            }
        }
        Ok(Measure { space, weights, normalized: false })
    }

    pub fn uniform(space: Arc<StateSpace>) -> Measure {
        let n = space.len();
        Measure { space, weights: vec![1.0; n], normalized: false }
    }

    pub fn space(&self) -> &Arc<StateSpace> {
        &self.space
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn total(&self) -> f64 {
        self.weights.iter().sum()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn normalize(mut self) -> Result<Measure, CtmcError> {
        let total = self.total();
        if total <= 0.0 || !total.is_finite() {
            return Err(CtmcError::ZeroTotalMass);
        }
        for w in &mut self.weights {
            *w /= total;
        }
        self.normalized = true;
        Ok(self)
    }

    /// Marks an already-normalized vector without rescaling (sum checked).
    pub fn assert_normalized(mut self) -> Measure {
        debug_assert!((self.total() - 1.0).abs() < 1e-9);
        self.normalized = true;
        self
    }

    /// Total variation distance `0.5 * sum |a - b|`.
    pub fn tv_distance(&self, other: &Measure) -> f64 {
        assert_eq!(self.len(), other.len());
        0.5 * self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

/// A discrete-time Markov chain: a row-stochastic matrix on a state space.
#[derive(Clone, Debug)]
pub struct Dtmc {
    space: Arc<StateSpace>,
    rows: Vec<BTreeMap<usize, f64>>,
}

impl Dtmc {
    pub fn new(space: Arc<StateSpace>, rows: Vec<BTreeMap<usize, f64>>) -> Result<Dtmc, CtmcError> {
        if rows.len() != space.len() {
            return Err(CtmcError::SizeMismatch(rows.len(), space.len()));
        }
        for (i, row) in rows.iter().enumerate() {
            let mut sum = 0.0;
            for (&j, &p) in row {
                if !(0.0..=1.0 + 1e-12).contains(&p) {
                    return Err(CtmcError::BadValue(p));
                }
                if j >= space.len() {
                    return Err(CtmcError::SizeMismatch(j, space.len()));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > 1e-9 {
                return Err(CtmcError::RowNotStochastic { row: i, sum });
            }
        }
        Ok(Dtmc { space, rows })
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

    pub fn prob(&self, i: usize, j: usize) -> f64 {
        self.rows[i].get(&j).copied().unwrap_or(0.0)
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.rows[i].iter().map(|(&j, &p)| (j, p))
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |(&j, &p)| (i, j, p)))
    }

    /// Max-norm residual of the discrete stationary equation
    /// `pi(j) = sum_i pi(i) p(i,j)`.
    pub fn stationary_residual(&self, pi: &Measure) -> f64 {
        let n = self.len();
        let mut inflow = vec![0.0; n];
        for (i, j, p) in self.entries() {
            inflow[j] += pi.weight(i) * p;
        }
        (0..n)
            .map(|j| (inflow[j] - pi.weight(j)).abs())
            .fold(0.0, f64::max)
    }
}

/// Reverses a discrete-time chain with respect to a reference measure:
/// `p~(i,j) = pi(j) p(j,i) / pi(i)`.
///
/// Rows of the result sum to 1 exactly when `pi` is stationary for `p`.
pub fn dtmc_reverse(p: &Dtmc, pi: &Measure) -> Result<Dtmc, CtmcError> {
    let n = p.len();
    if pi.len() != n {
        return Err(CtmcError::SizeMismatch(pi.len(), n));
    }
    let mut rows = vec![BTreeMap::new(); n];
    for (j, i, prob) in p.entries() {
        // contribution of p(j,i) to p~(i,j)
        if prob == 0.0 {
            continue;
        }
        if pi.weight(i) == 0.0 {
            if pi.weight(j) * prob > 0.0 {
                return Err(CtmcError::UnsupportedState(i));
            }
            continue;
        }
        let v = pi.weight(j) * prob / pi.weight(i);
        if v > 0.0 {
            *rows[i].entry(j).or_insert(0.0) += v;
        }
    }
    // Bypass the row-sum validation: when pi is not stationary the reversed
    // rows legitimately do not sum to 1; callers check with
    // `stationary_residual` when they need the certificate.
    Ok(Dtmc { space: p.space().clone(), rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveMethod {
    /// Direct elimination up to `direct_limit` states, power iteration above.
    Auto,
    Direct,
    Power,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub method: SolveMethod,
    /// Acceptance threshold for the max-norm stationary residual.
    pub tol: f64,
    /// Relative change threshold for power iteration.
    pub iter_tol: f64,
    pub max_iter: usize,
    /// Largest size solved by dense elimination under `Auto`.
    pub direct_limit: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            method: SolveMethod::Auto,
            tol: 1e-12,
            iter_tol: 1e-9,
            max_iter: 200_000,
            direct_limit: 2500,
        }
    }
}

/// Max-norm residual of the global balance equation
/// `a(j) pi(j) = sum_i pi(i) q(i,j)`.
pub fn stationary_residual(q: &RateMatrix, pi: &Measure) -> f64 {
    let n = q.len();
    let a = q.exit_rates();
    let mut inflow = vec![0.0; n];
    for (i, j, r) in q.entries() {
        inflow[j] += pi.weight(i) * r;
    }
    (0..n)
        .map(|j| (a[j] * pi.weight(j) - inflow[j]).abs())
        .fold(0.0, f64::max)
}

/// Solves the global balance equation for an irreducible chain and returns
/// the normalized stationary distribution.
///
/// Self-loops cancel from both sides of the balance equation, so they are
/// stripped before solving; the solution is unaffected.
pub fn stationary_distribution(
    q: &RateMatrix,
    opts: &SolverOptions,
) -> Result<Measure, CtmcError> {
    let n = q.len();
    if n == 0 {
        return Err(CtmcError::EmptySpace);
    }
    if !q.is_irreducible() {
        return Err(CtmcError::NotIrreducible);
    }
    let stripped = q.without_self_loops();
    let weights = if n == 1 {
        vec![1.0]
    } else {
        let direct = match opts.method {
            SolveMethod::Direct => true,
            SolveMethod::Power => false,
            SolveMethod::Auto => n <= opts.direct_limit,
        };
        if direct {
            gth_elimination(&stripped)
        } else {
            power_iteration(&stripped, opts)?
        }
    };
    let pi = Measure::new(q.space().clone(), weights)?.normalize()?;
    let res = stationary_residual(q, &pi);
    if res > opts.tol {
        return Err(CtmcError::SolverDidNotConverge { residual: res, iterations: 0 });
    }
    Ok(pi)
}

/// Grassmann-Taksar-Heyman elimination. Uses only additions and
/// multiplications of nonnegative quantities, which gives entrywise relative
/// accuracy near machine precision; no pivoting is needed.
fn gth_elimination(q: &RateMatrix) -> Vec<f64> {
    let n = q.len();
    let mut a = vec![0.0f64; n * n];
    for (i, j, r) in q.entries() {
        a[i * n + j] = r;
    }
    let mut elim_sum = vec![0.0f64; n];
    for k in (1..n).rev() {
        let s: f64 = (0..k).map(|j| a[k * n + j]).sum();
        elim_sum[k] = s;
        if s <= 0.0 {
            // unreachable for irreducible input; keep the state isolated
            continue;
        }
        for i in 0..k {
            let f = a[i * n + k] / s;
            if f == 0.0 {
                continue;
            }
            for j in 0..k {
                if j != i {
                    a[i * n + j] += f * a[k * n + j];
                }
            }
        }
    }
    let mut pi = vec![0.0f64; n];
    pi[0] = 1.0;
    for k in 1..n {
        if elim_sum[k] <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for i in 0..k {
            acc += pi[i] * a[i * n + k];
        }
        pi[k] = acc / elim_sum[k];
    }
    pi
}

/// Power iteration on the uniformized chain
/// `P = I + Q_conservative / Lambda`, `Lambda = 1.01 * max exit rate`.
fn power_iteration(q: &RateMatrix, opts: &SolverOptions) -> Result<Vec<f64>, CtmcError> {
    let n = q.len();
    let a = q.exit_rates();
    let lambda = 1.01 * a.iter().cloned().fold(0.0, f64::max);
    if lambda <= 0.0 {
        return Err(CtmcError::NotIrreducible);
    }
    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0f64; n];
    for it in 0..opts.max_iter {
        for v in next.iter_mut() {
            *v = 0.0;
        }
        for i in 0..n {
            let stay = 1.0 - a[i] / lambda;
            next[i] += pi[i] * stay;
            for (j, r) in q.row(i) {
                next[j] += pi[i] * r / lambda;
            }
        }
        let total: f64 = next.iter().sum();
        for v in next.iter_mut() {
            *v /= total;
        }
        let diff = pi
            .iter()
            .zip(&next)
            .map(|(x, y)| (x - y).abs() / y.abs().max(1e-300))
            .fold(0.0, f64::max);
        std::mem::swap(&mut pi, &mut next);
        if diff < opts.iter_tol {
            return Ok(pi);
        }
        if it == opts.max_iter - 1 {
            return Err(CtmcError::SolverDidNotConverge { residual: diff, iterations: opts.max_iter });
        }
    }
    Ok(pi)
}
