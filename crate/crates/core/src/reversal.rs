//! Time reversal of rate functions, Kelly's lemma, and reversibility.

use thiserror::Error;

use crate::close;
use crate::ctmc::{CtmcError, Measure, RateMatrix, State};

#[derive(Debug, Error)]
pub enum ReversalError {
    #[error("not a birth-death chain: positive rate on step {from} -> {to}")]
    NotBirthDeath { from: usize, to: usize },
    #[error("zero down-rate at level {0}")]
    ZeroDownRate(usize),
    #[error("state {0} unreachable from the base state")]
    UnreachableState(String),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
}

/// Time reversal of `q` with respect to a reference measure:
/// `q~(x,x') = pi(x') q(x',x) / pi(x)` where `pi(x) > 0`, and the whole row
/// vanishes where `pi(x) = 0`.
pub fn reverse(q: &RateMatrix, pi: &Measure) -> Result<RateMatrix, CtmcError> {
    if pi.len() != q.len() {
        return Err(CtmcError::SizeMismatch(pi.len(), q.len()));
    }
    let mut out = RateMatrix::zeros(q.space().clone());
    for (j, i, r) in q.entries() {
        // q(j,i) contributes to q~(i,j)
        if pi.weight(i) > 0.0 {
            out.add(i, j, pi.weight(j) * r / pi.weight(i));
        }
    }
    Ok(out)
}

/// Outcome of the Kelly's-lemma certificate for a guessed reversed chain.
#[derive(Clone, Debug, PartialEq)]
pub enum KellyVerdict {
    /// Both conditions hold; `pi` (normalized) is the stationary
    /// distribution of `q` and `q_tilde` is its reversal.
    Pass,
    /// The cross-balance identity `pi(i) q~(i,j) = pi(j) q(j,i)` fails.
    FailBalance { i: usize, j: usize, lhs: f64, rhs: f64 },
    /// Cross-balance holds but some exit rate differs between `q` and `q~`.
    FailRateConservation { state: usize, original: f64, reversed: f64 },
}

impl KellyVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, KellyVerdict::Pass)
    }
}

/// Checks the two conditions of Kelly's lemma for a guessed pair
/// `(q_tilde, pi)`: cross-balance on every pair of states and per-state
/// conservation of exit rates.
pub fn kelly_check(
    q: &RateMatrix,
    q_tilde: &RateMatrix,
    pi: &Measure,
    tol: f64,
) -> Result<KellyVerdict, CtmcError> {
    let n = q.len();
    if q_tilde.len() != n {
        return Err(CtmcError::SizeMismatch(q_tilde.len(), n));
    }
    if pi.len() != n {
        return Err(CtmcError::SizeMismatch(pi.len(), n));
    }
    // cross-balance over the union of both supports
    for (i, j, r) in q_tilde.entries() {
        let lhs = pi.weight(i) * r;
        let rhs = pi.weight(j) * q.rate(j, i);
        if !close(lhs, rhs, tol) {
            return Ok(KellyVerdict::FailBalance { i, j, lhs, rhs });
        }
    }
    for (j, i, r) in q.entries() {
        let lhs = pi.weight(i) * q_tilde.rate(i, j);
        let rhs = pi.weight(j) * r;
        if !close(lhs, rhs, tol) {
            return Ok(KellyVerdict::FailBalance { i, j, lhs, rhs });
        }
    }
    let a = q.exit_rates();
    let a_tilde = q_tilde.exit_rates();
    for i in 0..n {
        if !close(a[i], a_tilde[i], tol) {
            return Ok(KellyVerdict::FailRateConservation {
                state: i,
                original: a[i],
                reversed: a_tilde[i],
            });
        }
    }
    Ok(KellyVerdict::Pass)
}

/// Detailed balance: `pi(x) q(x,x') = pi(x') q(x',x)` for every pair,
/// compared scale-free.
pub fn is_reversible(q: &RateMatrix, pi: &Measure, tol: f64) -> bool {
    assert_eq!(pi.len(), q.len());
    q.entries()
        .all(|(i, j, r)| close(pi.weight(i) * r, pi.weight(j) * q.rate(j, i), tol))
}

/// Closed-form stationary measure of a birth-death chain, unnormalized with
/// `pi(0) = 1`: the running product of up-rates over down-rates.
///
/// Rates on steps other than +-1 (self-loops excepted) make the chain
/// non-birth-death and are rejected.
pub fn birth_death_measure(q: &RateMatrix) -> Result<Measure, ReversalError> {
    let n = q.len();
    for (i, j, _) in q.entries() {
        if i != j && (i as i64 - j as i64).abs() != 1 {
            return Err(ReversalError::NotBirthDeath { from: i, to: j });
        }
    }
    let mut weights = vec![0.0; n];
    weights[0] = 1.0;
    for x in 1..n {
        let up = q.rate(x - 1, x);
        let down = q.rate(x, x - 1);
        if down <= 0.0 {
            return Err(ReversalError::ZeroDownRate(x));
        }
        weights[x] = weights[x - 1] * up / down;
    }
    Ok(Measure::new(q.space().clone(), weights)?)
}

/// A failed cycle-consistency check: the product of rate ratios around
/// `cycle` (closed, first == last) differs between the two directions.
#[derive(Clone, Debug)]
pub struct CycleWitness {
    pub cycle: Vec<usize>,
    pub forward_product: f64,
    pub backward_product: f64,
}

#[derive(Debug)]
pub enum ReversibleMeasureOutcome {
    Measure(Measure),
    Inconsistent(CycleWitness),
}

/// Attempts to build the reversible measure by the path-product formula
/// along a breadth-first spanning tree from `base`, then checks every
/// non-tree edge for cycle consistency. A failed check returns the
/// fundamental cycle as a witness that `q` is not reversible.
pub fn reversible_measure(
    q: &RateMatrix,
    base: &State,
    tol: f64,
) -> Result<ReversibleMeasureOutcome, ReversalError> {
    let n = q.len();
    let root = q.space().require_index(base)?;
    let t = q.transpose();

    // BFS over edges positive in both directions (reversibility forces a
    // symmetric support, so a one-directional edge is already a witness).
    let mut weights = vec![0.0f64; n];
    let mut parent = vec![usize::MAX; n];
    let mut visited = vec![false; n];
    weights[root] = 1.0;
    visited[root] = true;
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(x) = queue.pop_front() {
        for (y, r_fwd) in q.row(x) {
            if y == x || visited[y] {
                continue;
            }
            let r_bwd = q.rate(y, x);
            if r_bwd <= 0.0 {
                // q(x,y) > 0 with q(y,x) = 0: detailed balance cannot hold.
                return Ok(ReversibleMeasureOutcome::Inconsistent(CycleWitness {
                    cycle: vec![x, y, x],
                    forward_product: r_fwd,
                    backward_product: 0.0,
                }));
            }
            visited[y] = true;
            parent[y] = x;
            weights[y] = weights[x] * r_fwd / r_bwd;
            queue.push_back(y);
        }
    }
    if let Some(u) = (0..n).find(|&u| !visited[u]) {
        // Not reachable through bidirectional edges. If some directed path
        // exists the chain is not reversible; otherwise the precondition
        // (irreducibility) is violated. Either way report what we know.
        if q.is_irreducible() {
            for (y, r) in t.row(u) {
                if visited[y] && q.rate(u, y) == 0.0 {
                    return Ok(ReversibleMeasureOutcome::Inconsistent(CycleWitness {
                        cycle: vec![y, u, y],
                        forward_product: r,
                        backward_product: 0.0,
                    }));
                }
            }
        }
        return Err(ReversalError::UnreachableState(q.space().state(u).to_string()));
    }

    // cycle consistency on non-tree edges
    for (x, y, r_fwd) in q.entries() {
        if x == y || parent[y] == x || parent[x] == y {
            continue;
        }
        let r_bwd = q.rate(y, x);
        if r_bwd <= 0.0 {
            return Ok(ReversibleMeasureOutcome::Inconsistent(CycleWitness {
                cycle: vec![x, y, x],
                forward_product: r_fwd,
                backward_product: 0.0,
            }));
        }
        let lhs = weights[x] * r_fwd;
        let rhs = weights[y] * r_bwd;
        if !close(lhs, rhs, tol) {
            return Ok(ReversibleMeasureOutcome::Inconsistent(fundamental_cycle(
                &parent, root, x, y, lhs, rhs,
            )));
        }
    }
    Ok(ReversibleMeasureOutcome::Measure(Measure::new(
        q.space().clone(),
        weights,
    )?))
}

fn fundamental_cycle(
    parent: &[usize],
    root: usize,
    x: usize,
    y: usize,
    lhs: f64,
    rhs: f64,
) -> CycleWitness {
    let path_to_root = |mut v: usize| {
        let mut p = vec![v];
        while v != root {
            v = parent[v];
            p.push(v);
        }
        p
    };
    let px = path_to_root(x);
    let py = path_to_root(y);
    // trim the common suffix down to the lowest common ancestor
    let mut ix = px.len();
    let mut iy = py.len();
    while ix > 1 && iy > 1 && px[ix - 2] == py[iy - 2] {
        ix -= 1;
        iy -= 1;
    }
    let mut cycle: Vec<usize> = px[..ix].iter().rev().cloned().collect(); // lca .. x
    cycle.extend(py[..iy - 1].iter().cloned()); // y .. below-lca
    cycle.push(cycle[0]);
    CycleWitness { cycle, forward_product: lhs, backward_product: rhs }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{stationary_distribution, SolverOptions, StateSpace};

    fn mm1(lambda: f64, mu: f64, bound: u32) -> RateMatrix {
        let space = StateSpace::enumerate_box(&[bound]);
        let mut q = RateMatrix::zeros(space);
        for x in 0..bound as usize {
            q.add(x, x + 1, lambda);
            q.add(x + 1, x, mu);
        }
        q
    }

    fn asymmetric_3cycle() -> RateMatrix {
        let space = StateSpace::enumerate_box(&[2]);
        let mut q = RateMatrix::zeros(space);
        for i in 0..3usize {
            q.add(i, (i + 1) % 3, 2.0);
            q.add((i + 1) % 3, i, 1.0);
        }
        q
    }

    #[test]
    fn mm1_reversal_is_identity_under_stationary_measure() {
        let q = mm1(1.0, 2.0, 40);
        let pi = stationary_distribution(&q, &SolverOptions::default()).unwrap();
        let rev = reverse(&q, &pi).unwrap();
        assert!(rev.max_abs_diff(&q) < 1e-12);
        assert!(is_reversible(&q, &pi, 1e-12));
    }

    #[test]
    fn reverse_with_uniform_measure_is_transpose() {
        let q = asymmetric_3cycle();
        let pi = Measure::uniform(q.space().clone());
        let rev = reverse(&q, &pi).unwrap();
        assert!(rev.max_abs_diff(&q.transpose()) < 1e-15);
    }

    #[test]
    fn zero_weight_rows_vanish() {
        let q = mm1(1.0, 2.0, 3);
        let pi = Measure::new(q.space().clone(), vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let rev = reverse(&q, &pi).unwrap();
        assert_eq!(rev.row(2).count(), 0);
    }

    #[test]
    fn triple_reversal_equals_single_with_zero_weights() {
        let q = mm1(1.0, 2.0, 5);
        let pi = Measure::new(q.space().clone(), vec![1.0, 0.5, 0.0, 0.25, 1.0, 0.7]).unwrap();
        let r1 = reverse(&q, &pi).unwrap();
        let r2 = reverse(&r1, &pi).unwrap();
        let r3 = reverse(&r2, &pi).unwrap();
        assert!(r3.max_abs_diff(&r1) < 1e-14);
        // and with zero weights the double reversal differs from q
        assert!(r2.max_abs_diff(&q) > 0.1);
    }

    #[test]
    fn kelly_certificate_on_mm1() {
        let q = mm1(1.0, 2.0, 30);
        let pi = stationary_distribution(&q, &SolverOptions::default()).unwrap();
        // reversible: guess q~ = q
        assert!(kelly_check(&q, &q, &pi, 1e-10).unwrap().passed());

        // perturbing pi at one state breaks cross-balance
        let mut w = pi.weights().to_vec();
        w[4] *= 1.1;
        let bad = Measure::new(q.space().clone(), w).unwrap();
        assert!(matches!(
            kelly_check(&q, &q, &bad, 1e-10).unwrap(),
            KellyVerdict::FailBalance { .. }
        ));

        // reversal w.r.t. a non-stationary measure satisfies cross-balance
        // by construction but fails rate conservation
        let skew = Measure::new(
            q.space().clone(),
            (0..q.len()).map(|i| 1.0 / (i + 1) as f64).collect(),
        )
        .unwrap();
        let guess = reverse(&q, &skew).unwrap();
        assert!(matches!(
            kelly_check(&q, &guess, &skew, 1e-10).unwrap(),
            KellyVerdict::FailRateConservation { .. }
        ));
    }

    #[test]
    fn asymmetric_cycle_is_not_reversible() {
        let q = asymmetric_3cycle();
        let pi = Measure::uniform(q.space().clone()).normalize().unwrap();
        assert!(!is_reversible(&q, &pi, 1e-12));
    }

    #[test]
    fn birth_death_measure_mm1_and_mm2() {
        let q = mm1(1.0, 2.0, 20);
        let m = birth_death_measure(&q).unwrap();
        for x in 0..=20usize {
            assert!((m.weight(x) - 0.5f64.powi(x as i32)).abs() < 1e-15);
        }

        // M/M/2 with lambda = mu = 1: (1, 1, 1/2, 1/4, ...)
        let space = StateSpace::enumerate_box(&[6]);
        let mut q = RateMatrix::zeros(space);
        for x in 0..6usize {
            q.add(x, x + 1, 1.0);
            q.add(x + 1, x, (x + 1).min(2) as f64);
        }
        let m = birth_death_measure(&q).unwrap();
        let expect = [1.0, 1.0, 0.5, 0.25, 0.125, 0.0625, 0.03125];
        for (x, e) in expect.iter().enumerate() {
            assert!((m.weight(x) - e).abs() < 1e-15);
        }
    }

    #[test]
    fn birth_death_measure_rejects_jumps() {
        let space = StateSpace::enumerate_box(&[3]);
        let mut q = RateMatrix::zeros(space);
        q.add(0, 2, 1.0);
        assert!(matches!(
            birth_death_measure(&q),
            Err(ReversalError::NotBirthDeath { from: 0, to: 2 })
        ));
    }

    #[test]
    fn birth_death_uniform_when_rates_equal() {
        let q = mm1(3.0, 3.0, 10);
        let m = birth_death_measure(&q).unwrap();
        assert!(m.weights().iter().all(|&w| (w - 1.0).abs() < 1e-15));
    }

    #[test]
    fn reversible_measure_agrees_with_birth_death_form() {
        let q = mm1(1.0, 2.0, 25);
        let base = State(vec![0]);
        match reversible_measure(&q, &base, 1e-10).unwrap() {
            ReversibleMeasureOutcome::Measure(m) => {
                let bd = birth_death_measure(&q).unwrap();
                for x in 0..q.len() {
                    assert!((m.weight(x) - bd.weight(x)).abs() < 1e-12);
                }
            }
            ReversibleMeasureOutcome::Inconsistent(w) => panic!("unexpected witness {w:?}"),
        }
    }

    #[test]
    fn reversible_measure_witnesses_asymmetric_cycle() {
        let q = asymmetric_3cycle();
        match reversible_measure(&q, &State(vec![0]), 1e-10).unwrap() {
            ReversibleMeasureOutcome::Inconsistent(w) => {
                let mut nodes = w.cycle.clone();
                nodes.pop();
                nodes.sort_unstable();
                assert_eq!(nodes, vec![0, 1, 2]);
            }
            ReversibleMeasureOutcome::Measure(_) => panic!("cycle should be inconsistent"),
        }
    }

    #[test]
    fn reversible_measure_single_state() {
        let space = StateSpace::enumerate_box(&[0]);
        let q = RateMatrix::zeros(space);
        match reversible_measure(&q, &State(vec![0]), 1e-10).unwrap() {
            ReversibleMeasureOutcome::Measure(m) => assert_eq!(m.weights(), &[1.0]),
            _ => panic!(),
        }
    }
}
