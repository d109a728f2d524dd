//! Symmetric-service queues: position-based disciplines with per-type
//! staged (Erlang-like) service and the product closed form.

use std::collections::BTreeMap;

use crate::balance::{Label, SubTransitionFamily};
use crate::ctmc::{Measure, RateMatrix, State, StateSpace};
use crate::models::{ModelError, QueueModel};

const MAX_STATES: usize = 500_000;

/// One customer type: exogenous arrival rate and per-stage completion
/// rates. A newly arriving customer starts at the last stage
/// (`stage_rates.len()`) and departs after completing stage 1.
#[derive(Clone, Debug)]
pub struct CustomerType {
    pub name: String,
    pub alpha: f64,
    /// `stage_rates[j-1]` is the completion rate of stage `j`.
    pub stage_rates: Vec<f64>,
}

/// Stage rates `eta_uj = k * zeta` make the total service amount Erlang-k
/// with mean `1/zeta`.
pub fn erlang_type(name: &str, alpha: f64, k: usize, zeta: f64) -> CustomerType {
    CustomerType { name: name.into(), alpha, stage_rates: vec![k as f64 * zeta; k] }
}

/// Position-based service discipline: `gamma(l, n)` is the service effort
/// at position `l` of `n`, `delta(l, n)` the insertion probability, and
/// `phi(n) = sum_l gamma(l, n)` the total capacity.
#[derive(Clone, Debug)]
pub enum Discipline {
    /// `gamma = delta = 1/n`; unit total capacity shared equally.
    ProcessorSharing,
    /// Effort and insertion concentrated at the last position.
    PreemptiveLcfs,
    /// Serve position 1, insert at position n. Not symmetric for n >= 2.
    Fcfs,
    /// Explicit tables indexed `[n-1][l-1]`, `1 <= l <= n`.
    Custom { gamma: Vec<Vec<f64>>, delta: Vec<Vec<f64>> },
}

impl Discipline {
    pub fn gamma(&self, l: usize, n: usize) -> f64 {
        debug_assert!(l >= 1 && l <= n);
        match self {
            Discipline::ProcessorSharing => 1.0 / n as f64,
            Discipline::PreemptiveLcfs => {
                if l == n {
                    1.0
                } else {
                    0.0
                }
            }
            Discipline::Fcfs => {
                if l == 1 {
                    1.0
                } else {
                    0.0
                }
            }
            Discipline::Custom { gamma, .. } => gamma[n - 1][l - 1],
        }
    }

    pub fn delta(&self, l: usize, n: usize) -> f64 {
        debug_assert!(l >= 1 && l <= n);
        match self {
            Discipline::ProcessorSharing => 1.0 / n as f64,
            Discipline::PreemptiveLcfs | Discipline::Fcfs => {
                if l == n {
                    1.0
                } else {
                    0.0
                }
            }
            Discipline::Custom { delta, .. } => delta[n - 1][l - 1],
        }
    }

    pub fn phi(&self, n: usize) -> f64 {
        (1..=n).map(|l| self.gamma(l, n)).sum()
    }
}

#[derive(Clone, Debug)]
pub struct SymmetricQueueParams {
    pub types: Vec<CustomerType>,
    pub discipline: Discipline,
}

/// The symmetric-service identity `phi(n) delta(l, n) = gamma(l, n)` for
/// all `1 <= l <= n <= n_max`.
pub fn check_symmetric(discipline: &Discipline, n_max: usize, tol: f64) -> bool {
    for n in 1..=n_max {
        let phi = discipline.phi(n);
        for l in 1..=n {
            if !crate::close(phi * discipline.delta(l, n), discipline.gamma(l, n), tol) {
                return false;
            }
        }
    }
    true
}

/// In-system customers as a position sequence of (type index, remaining
/// stage). Encoded into coordinates as `[n, u_1, w_1, .., u_n, w_n, 0..]`
/// padded to fixed length `1 + 2 n_max`.
fn encode(seq: &[(usize, u32)], n_max: usize) -> State {
    let mut c = Vec::with_capacity(1 + 2 * n_max);
    c.push(seq.len() as u32);
    for &(u, w) in seq {
        c.push(u as u32);
        c.push(w);
    }
    c.resize(1 + 2 * n_max, 0);
    State(c)
}

fn decode(state: &State) -> Vec<(usize, u32)> {
    let n = state.0[0] as usize;
    (0..n).map(|l| (state.0[1 + 2 * l] as usize, state.0[2 + 2 * l])).collect()
}

fn enumerate_sequences(types: &[CustomerType], n_max: usize) -> Vec<Vec<(usize, u32)>> {
    let mut all: Vec<Vec<(usize, u32)>> = vec![Vec::new()];
    let mut layer: Vec<Vec<(usize, u32)>> = vec![Vec::new()];
    for _ in 1..=n_max {
        let mut next = Vec::new();
        for seq in &layer {
            for (u, ty) in types.iter().enumerate() {
                for w in 1..=ty.stage_rates.len() as u32 {
                    let mut s = seq.clone();
                    s.push((u, w));
                    next.push(s);
                }
            }
        }
        all.extend(next.iter().cloned());
        layer = next;
    }
    all
}

/// Builds the symmetric queue on the truncated space `n <= n_max`.
///
/// Arrivals that would exceed `n_max` are dropped (their rate mass is
/// recorded); the closed form stays exactly stationary on the truncated
/// space because each dropped arrival flow balances against a departure
/// flow from the layer that was cut away.
pub fn build_symmetric_queue(
    params: &SymmetricQueueParams,
    n_max: usize,
) -> Result<QueueModel, ModelError> {
    for ty in &params.types {
        if !(ty.alpha > 0.0) {
            return Err(ModelError::NonPositiveRate {
                name: format!("alpha[{}]", ty.name),
                value: ty.alpha,
            });
        }
        if ty.stage_rates.is_empty() {
            return Err(ModelError::InvalidDistribution(format!(
                "type {} has no stages",
                ty.name
            )));
        }
        for (j, &eta) in ty.stage_rates.iter().enumerate() {
            if !(eta > 0.0) {
                return Err(ModelError::NonPositiveRate {
                    name: format!("eta[{},{}]", ty.name, j + 1),
                    value: eta,
                });
            }
        }
    }
    let disc = &params.discipline;
    for n in 1..=n_max {
        let dsum: f64 = (1..=n).map(|l| disc.delta(l, n)).sum();
        if (dsum - 1.0).abs() > 1e-9 {
            return Err(ModelError::InvalidDistribution(format!(
                "delta(., {n}) sums to {dsum}, not 1"
            )));
        }
        if !(disc.phi(n) > 0.0) {
            return Err(ModelError::NonPositiveRate {
                name: format!("phi({n})"),
                value: disc.phi(n),
            });
        }
    }
    if !check_symmetric(disc, n_max, 1e-12) {
        let (l, n) = first_violation(disc, n_max);
        return Err(ModelError::SymmetryViolated { l, n });
    }

    let seqs = enumerate_sequences(&params.types, n_max);
    if seqs.len() > MAX_STATES {
        return Err(ModelError::StateSpaceTooLarge(seqs.len(), MAX_STATES));
    }
    let states: Vec<State> = seqs.iter().map(|s| encode(s, n_max)).collect();
    let space = StateSpace::from_states(1 + 2 * n_max, states)?;

    let mut q = RateMatrix::zeros(space.clone());
    let mut internal = RateMatrix::zeros(space.clone());
    let mut arr_parts: Vec<RateMatrix> =
        params.types.iter().map(|_| RateMatrix::zeros(space.clone())).collect();
    let mut dep_parts: Vec<RateMatrix> =
        params.types.iter().map(|_| RateMatrix::zeros(space.clone())).collect();
    let mut boundary = vec![false; space.len()];

    for (xi, seq) in seqs.iter().enumerate() {
        let n = seq.len();
        // arrivals: type u enters position i of n+1 with prob delta(i, n+1)
        if n < n_max {
            for (u, ty) in params.types.iter().enumerate() {
                let k_u = ty.stage_rates.len() as u32;
                for i in 1..=n + 1 {
                    let p = disc.delta(i, n + 1);
                    if p == 0.0 {
                        continue;
                    }
                    let mut s2 = seq.clone();
                    s2.insert(i - 1, (u, k_u));
                    let target = space.require_index(&encode(&s2, n_max))?;
                    let rate = ty.alpha * p;
                    q.add(xi, target, rate);
                    arr_parts[u].add(xi, target, rate);
                }
            }
        } else {
            boundary[xi] = true;
            let lost: f64 = params.types.iter().map(|t| t.alpha).sum();
            q.drop_rate(xi, lost);
        }
        // service effort at each occupied position
        for i in 1..=n {
            let (u, w) = seq[i - 1];
            let effort = disc.gamma(i, n);
            if effort == 0.0 {
                continue;
            }
            let eta = params.types[u].stage_rates[w as usize - 1];
            let rate = effort * eta;
            if w == 1 {
                // departure: remove position i
                let mut s2 = seq.clone();
                s2.remove(i - 1);
                let target = space.require_index(&encode(&s2, n_max))?;
                q.add(xi, target, rate);
                dep_parts[u].add(xi, target, rate);
            } else {
                // internal stage decrement
                let mut s2 = seq.clone();
                s2[i - 1] = (u, w - 1);
                let target = space.require_index(&encode(&s2, n_max))?;
                q.add(xi, target, rate);
                internal.add(xi, target, rate);
            }
        }
    }

    // closed form: prod_l alpha_{u_l} / (phi(l) eta_{u_l, w_l})
    let mut weights = Vec::with_capacity(seqs.len());
    for seq in &seqs {
        let mut w = 1.0;
        for (l, &(u, stage)) in seq.iter().enumerate() {
            let ty = &params.types[u];
            w *= ty.alpha / (disc.phi(l + 1) * ty.stage_rates[stage as usize - 1]);
        }
        weights.push(w);
    }
    let closed = Measure::new(space.clone(), weights)?.normalize()?;

    let mut parts = BTreeMap::new();
    let mut gamma_map = BTreeMap::new();
    for (u, ty) in params.types.iter().enumerate() {
        let la = Label::arrival_of(&ty.name);
        let ld = Label::departure_of(&ty.name);
        parts.insert(la.clone(), std::mem::replace(&mut arr_parts[u], RateMatrix::zeros(space.clone())));
        parts.insert(ld.clone(), std::mem::replace(&mut dep_parts[u], RateMatrix::zeros(space.clone())));
        gamma_map.insert(la.clone(), ld.clone());
        gamma_map.insert(ld, la);
    }
    let family = SubTransitionFamily::new(q, parts, gamma_map)?;
    let mut model = QueueModel::new(space, family)
        .with_closed_form(closed)
        .with_boundary(boundary);
    for ty in &params.types {
        model.params.insert(format!("alpha:{}", ty.name), ty.alpha);
    }
    let _ = internal; // internal rates stay unlabeled in the family
    Ok(model)
}

fn first_violation(disc: &Discipline, n_max: usize) -> (usize, usize) {
    for n in 1..=n_max {
        let phi = disc.phi(n);
        for l in 1..=n {
            if !crate::close(phi * disc.delta(l, n), disc.gamma(l, n), 1e-12) {
                return (l, n);
            }
        }
    }
    (0, 0)
}

/// Decodes a symmetric-queue state back into its position sequence.
pub fn position_sequence(state: &State) -> Vec<(usize, u32)> {
    decode(state)
}
