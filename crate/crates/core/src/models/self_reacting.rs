//! Self-reacting systems: closed compositions in which released entities
//! are routed among types and instantly re-admitted as arrivals, together
//! with the balanced-departure constructions (batch-movement and Whittle
//! networks) that give closed-form stationary measures.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::balance::{Label, SubTransitionFamily};
use crate::ctmc::{Measure, RateMatrix, State, StateSpace};
use crate::models::{Kernel, ModelError, QueueModel};

/// Routing among types, either one matrix for every release state or an
/// explicit per-state family `r(u, y, u')`.
#[derive(Clone, Debug)]
pub enum Routing {
    Global(Vec<Vec<f64>>),
    PerState(Vec<Vec<Vec<f64>>>),
}

impl Routing {
    pub fn at(&self, y: usize) -> &Vec<Vec<f64>> {
        match self {
            Routing::Global(r) => r,
            Routing::PerState(rs) => &rs[y],
        }
    }
}

/// Dynamics of a self-reacting system: entity `u` released under state `x`
/// with rate `q_du(x, y)`, transferred to `u'` with probability
/// `r(u, y, u')`, then admitted with effect `p_au'(y, x')`.
#[derive(Clone)]
pub struct SelfReactingSpec {
    pub space: Arc<StateSpace>,
    pub types: Vec<String>,
    /// `departures[u]` holds `q_du(x, y)`.
    pub departures: Vec<RateMatrix>,
    pub routing: Routing,
    /// `arrivals[u]` holds `p_au(y, x')`; only rows that can receive a
    /// transfer need to be populated (and stochastic).
    pub arrivals: Vec<Kernel>,
    pub internal: RateMatrix,
}

/// Composes the full generator
/// `q(x,x') = sum_{u,y,u'} q_du(x,y) r(u,y,u') p_au'(y,x') + q_I(x,x')`
/// and labels the family by transfer triples with the permutation
/// `(u, y, u') -> (u', y, u)`.
pub fn build_self_reacting(spec: &SelfReactingSpec) -> Result<QueueModel, ModelError> {
    let t = spec.types.len();
    let mut q = RateMatrix::zeros(spec.space.clone());
    q.add_matrix(&spec.internal);
    let mut parts: BTreeMap<Label, RateMatrix> = BTreeMap::new();

    for u in 0..t {
        for (x, y, d_rate) in spec.departures[u].entries() {
            let r_y = spec.routing.at(y);
            let row_sum: f64 = r_y[u].iter().sum();
            if (row_sum - 1.0).abs() > 1e-9 {
                return Err(ModelError::RoutingNotStochastic { row: u, sum: row_sum });
            }
            for (u2, &r) in r_y[u].iter().enumerate() {
                if r == 0.0 {
                    continue;
                }
                let ksum = spec.arrivals[u2].row_sum(y);
                if (ksum - 1.0).abs() > 1e-9 {
                    return Err(ModelError::KernelNotStochastic {
                        ty: spec.types[u2].clone(),
                        row: y,
                        sum: ksum,
                    });
                }
                let label = Label::transfer(&spec.types[u], y, &spec.types[u2]);
                for (x2, p) in spec.arrivals[u2].row(y) {
                    let rate = d_rate * r * p;
                    q.add(x, x2, rate);
                    parts
                        .entry(label.clone())
                        .or_insert_with(|| RateMatrix::zeros(spec.space.clone()))
                        .add(x, x2, rate);
                }
            }
        }
    }

    // close the label set under the permutation so gamma is a bijection
    let mut gamma = BTreeMap::new();
    let existing: Vec<Label> = parts.keys().cloned().collect();
    for label in existing {
        let (u, y, u2) = parse_transfer(&label, &spec.types);
        let dual = Label::transfer(&spec.types[u2], y, &spec.types[u]);
        parts
            .entry(dual.clone())
            .or_insert_with(|| RateMatrix::zeros(spec.space.clone()));
        gamma.insert(label.clone(), dual.clone());
        gamma.insert(dual, label);
    }
    let family = SubTransitionFamily::new(q, parts, gamma)?;
    Ok(QueueModel::new(spec.space.clone(), family))
}

fn parse_transfer(label: &Label, types: &[String]) -> (usize, usize, usize) {
    let s = label.as_str();
    let parts: Vec<&str> = s.split(">").collect();
    assert_eq!(parts.len(), 3, "not a transfer label: {s}");
    let u = types.iter().position(|t| t == parts[0]).expect("known type");
    let y: usize = parts[1].trim_start_matches('y').parse().expect("state index");
    let u2 = types.iter().position(|t| t == parts[2]).expect("known type");
    (u, y, u2)
}

#[derive(Clone, Debug)]
pub struct RoutingInvariant {
    pub nu: Vec<f64>,
    /// False when the routing matrix is reducible; `nu` then combines the
    /// per-recurrent-class solutions with equal class weights and assigns
    /// zero to transient types.
    pub irreducible: bool,
}

/// Solves the type-level traffic equation
/// `sum_u' nu(u') r(u', u) = nu(u)`, normalized to total mass 1.
pub fn routing_invariant(r: &[Vec<f64>], tol: f64) -> Result<RoutingInvariant, ModelError> {
    let t = r.len();
    for (u, row) in r.iter().enumerate() {
        if row.len() != t {
            return Err(ModelError::RoutingNotStochastic { row: u, sum: f64::NAN });
        }
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > tol.max(1e-9) || row.iter().any(|&p| p < 0.0) {
            return Err(ModelError::RoutingNotStochastic { row: u, sum });
        }
    }
    let sccs = strongly_connected_components(r);
    // recurrent classes have no edges leaving the class
    let mut comp_of = vec![0usize; t];
    for (c, members) in sccs.iter().enumerate() {
        for &u in members {
            comp_of[u] = c;
        }
    }
    let mut recurrent: Vec<&Vec<usize>> = Vec::new();
    for (c, members) in sccs.iter().enumerate() {
        let closed = members
            .iter()
            .all(|&u| r[u].iter().enumerate().all(|(v, &p)| p == 0.0 || comp_of[v] == c));
        if closed {
            recurrent.push(members);
        }
    }
    let mut nu = vec![0.0; t];
    for members in &recurrent {
        let local = class_stationary(r, members);
        for (k, &u) in members.iter().enumerate() {
            nu[u] = local[k] / recurrent.len() as f64;
        }
    }
    let irreducible = recurrent.len() == 1 && recurrent[0].len() == t;
    Ok(RoutingInvariant { nu, irreducible })
}

fn strongly_connected_components(r: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let t = r.len();
    // Kosaraju: DFS finish order, then reverse-graph DFS
    let mut order = Vec::with_capacity(t);
    let mut seen = vec![false; t];
    for start in 0..t {
        if seen[start] {
            continue;
        }
        // iterative DFS with explicit post-order
        let mut stack = vec![(start, 0usize)];
        seen[start] = true;
        while let Some(&mut (u, ref mut next)) = stack.last_mut() {
            let mut advanced = false;
            while *next < t {
                let v = *next;
                *next += 1;
                if r[u][v] > 0.0 && !seen[v] {
                    seen[v] = true;
                    stack.push((v, 0));
                    advanced = true;
                    break;
                }
            }
            if !advanced && stack.last().map(|&(x, n)| x == u && n >= t).unwrap_or(false) {
                order.push(u);
                stack.pop();
            }
        }
    }
    let mut comp = vec![usize::MAX; t];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for &start in order.iter().rev() {
        if comp[start] != usize::MAX {
            continue;
        }
        let c = comps.len();
        let mut members = Vec::new();
        let mut stack = vec![start];
        comp[start] = c;
        while let Some(u) = stack.pop() {
            members.push(u);
            for v in 0..t {
                if r[v][u] > 0.0 && comp[v] == usize::MAX {
                    comp[v] = c;
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    comps
}

/// Stationary distribution of a stochastic matrix restricted to a closed
/// class, by elimination on the embedded generator.
fn class_stationary(r: &[Vec<f64>], members: &[usize]) -> Vec<f64> {
    let m = members.len();
    if m == 1 {
        return vec![1.0];
    }
    let mut a = vec![0.0f64; m * m];
    for (i, &u) in members.iter().enumerate() {
        for (j, &v) in members.iter().enumerate() {
            if i != j {
                a[i * m + j] = r[u][v];
            }
        }
    }
    let mut elim = vec![0.0f64; m];
    for k in (1..m).rev() {
        let s: f64 = (0..k).map(|j| a[k * m + j]).sum();
        elim[k] = s;
        if s <= 0.0 {
            continue;
        }
        for i in 0..k {
            let f = a[i * m + k] / s;
            if f == 0.0 {
                continue;
            }
            for j in 0..k {
                if j != i {
                    a[i * m + j] += f * a[k * m + j];
                }
            }
        }
    }
    let mut pi = vec![0.0f64; m];
    pi[0] = 1.0;
    for k in 1..m {
        if elim[k] <= 0.0 {
            continue;
        }
        pi[k] = (0..k).map(|i| pi[i] * a[i * m + k]).sum::<f64>() / elim[k];
    }
    let total: f64 = pi.iter().sum();
    pi.iter().map(|&w| w / total).collect()
}

/// Time reversal of a routing matrix with respect to an invariant measure:
/// `r~(u', u) = nu(u) r(u, u') / nu(u')`.
pub fn reversed_routing(r: &[Vec<f64>], nu: &[f64]) -> Result<Vec<Vec<f64>>, ModelError> {
    let t = r.len();
    let mut out = vec![vec![0.0; t]; t];
    for u2 in 0..t {
        if nu[u2] == 0.0 {
            let inflow: f64 = (0..t).map(|u| nu[u] * r[u][u2]).sum();
            if inflow > 0.0 {
                return Err(ModelError::ZeroWeightType(u2));
            }
            out[u2][u2] = 1.0;
            continue;
        }
        for u in 0..t {
            out[u2][u] = nu[u] * r[u][u2] / nu[u2];
        }
    }
    Ok(out)
}

/// Departure rates of the Phi-balanced form
/// `q_du(x, y) = nu(y, u) / Phi(x)` on the graph of the release map
/// `g(y, u) = x`.
pub fn balanced_departure_rates(
    space: &Arc<StateSpace>,
    n_types: usize,
    phi: &[f64],
    nu: impl Fn(usize, usize) -> f64,
    release: impl Fn(usize, usize) -> Option<usize>,
) -> Result<Vec<RateMatrix>, ModelError> {
    for (x, &p) in phi.iter().enumerate() {
        if !(p > 0.0) {
            return Err(ModelError::ZeroPhi(x));
        }
    }
    let mut out = Vec::with_capacity(n_types);
    for u in 0..n_types {
        let mut qd = RateMatrix::zeros(space.clone());
        for y in 0..space.len() {
            if let Some(x) = release(y, u) {
                let v = nu(y, u);
                if v > 0.0 {
                    qd.add(x, y, v / phi[x]);
                }
            }
        }
        out.push(qd);
    }
    Ok(out)
}

/// Stationary distribution of a balanced self-reacting system via the
/// traffic construction: verifies the internal self-duality condition, the
/// per-state traffic equation for the `nu` implied by the departure rates,
/// and the arrival-consistency identity, then returns `pi proportional to
/// Phi` normalized.
pub fn self_reacting_stationary(
    spec: &SelfReactingSpec,
    phi: &[f64],
    tol: f64,
) -> Result<Measure, ModelError> {
    let ns = spec.space.len();
    let t = spec.types.len();
    for (x, &p) in phi.iter().enumerate() {
        if !(p > 0.0) {
            return Err(ModelError::ZeroPhi(x));
        }
    }
    // candidate measure pi = alpha Phi; internal part must be self-dual
    let model = build_self_reacting(spec)?;
    let q = model.q();
    let a = q.exit_rates();
    let b = spec.internal.exit_rates();
    for (x, x2, r) in spec.internal.entries() {
        let lhs = phi[x] * r;
        let rhs = phi[x2] * spec.internal.rate(x2, x);
        if !crate::close(lhs, rhs, tol) {
            return Err(ModelError::E4Violated(x, x2));
        }
    }
    for x in 0..ns {
        if b[x] >= a[x] {
            return Err(ModelError::E4Violated(x, x));
        }
    }
    // nu implied by the departure rates: nu(y, u) = q_du(g(y,u), y) Phi(g)
    let mut nu = vec![vec![0.0f64; t]; ns];
    for u in 0..t {
        for y in 0..ns {
            let mut seen = 0;
            for (x, yy, r) in spec.departures[u].entries() {
                if yy == y {
                    seen += 1;
                    if seen > 1 {
                        return Err(ModelError::InvalidDistribution(format!(
                            "release state for (y={y}, u={u}) is not unique"
                        )));
                    }
                    nu[y][u] = r * phi[x];
                }
            }
        }
    }
    // per-state traffic equation over the released types
    for y in 0..ns {
        let r_y = spec.routing.at(y);
        for u in 0..t {
            if nu[y][u] == 0.0 {
                continue;
            }
            let inflow: f64 = (0..t).map(|u2| nu[y][u2] * r_y[u2][u]).sum();
            if !crate::close(inflow, nu[y][u], tol) {
                return Err(ModelError::InvalidDistribution(format!(
                    "nu implied by departures does not solve the traffic equation at y={y}, u={u}"
                )));
            }
        }
    }
    // arrival consistency: Phi(x) (a(x) - b(x)) = sum_{y,u} nu(y,u) p_au(y,x)
    let mut rhs = vec![0.0f64; ns];
    for u in 0..t {
        for (y, x, p) in spec.arrivals[u].entries() {
            rhs[x] += nu[y][u] * p;
        }
    }
    for x in 0..ns {
        let lhs = phi[x] * (a[x] - b[x]);
        if !crate::close(lhs, rhs[x], tol) {
            return Err(ModelError::ArrivalConsistencyFailed { state: x, lhs, rhs: rhs[x] });
        }
    }
    Ok(Measure::new(spec.space.clone(), phi.to_vec())?.normalize()?)
}

/// Open or closed queueing network with batch movements: state is the
/// per-node occupancy vector, types are batch vectors `(u_0, .., u_n)`
/// whose zeroth entry is the external component, and departures are
/// Phi-balanced per the release map `y = x - u^+`.
#[derive(Clone, Debug)]
pub struct BatchMovementSpec {
    /// Inclusive per-node bounds of the occupancy box.
    pub bounds: Vec<u32>,
    /// Batch vectors of length `bounds.len() + 1`.
    pub types: Vec<Vec<u32>>,
    /// Base type-level routing; must conserve total batch size.
    pub routing: Vec<Vec<f64>>,
    /// `Phi(x)` per state of the box (enumerated lexicographically).
    pub phi: Vec<f64>,
    /// `Psi(y)` per state; defaults to 1.
    pub psi: Option<Vec<f64>>,
}

/// Builds the batch-movement network with departure rates
/// `q_du(x, x - u^+) = Psi(x - u^+) nu(u) / Phi(x)`.
///
/// Transfers whose re-admission would leave the box are redirected back to
/// the released type (a composed self-loop), which keeps every routing row
/// stochastic; when the base routing is reversible with respect to `nu`
/// this redirect preserves the closed form `pi proportional to Phi`
/// exactly on the box.
pub fn build_batch_movement_network(
    spec: &BatchMovementSpec,
) -> Result<(QueueModel, SelfReactingSpec, Vec<f64>), ModelError> {
    let nu = routing_invariant(&spec.routing, 1e-9)?.nu;
    let psi = spec.psi.clone();
    let (srs, _) = assemble_batch_movement(
        &spec.bounds,
        &spec.types,
        &spec.routing,
        |phi_x, psi_y, u| psi_y * nu[u] / phi_x,
        &spec.phi,
        psi.as_deref(),
    )?;
    let model = build_self_reacting(&srs)?;
    let closed = Measure::new(srs.space.clone(), spec.phi.clone())?.normalize()?;
    let model = model.with_closed_form(closed);
    Ok((model, srs, nu))
}

/// Whittle network with Phi-balanced departure intensities:
/// `q_du(x, x - u^+) = Psi(x - u^+) / Phi(x)` over unit batches, routing
/// drawn independently with invariant proportional to `(1, w_1, .., w_n)`,
/// and closed form `C Phi(x) prod_i w_i^(x_i)`.
#[derive(Clone, Debug)]
pub struct WhittleSpec {
    pub bounds: Vec<u32>,
    pub w: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
}

pub fn build_whittle(
    spec: &WhittleSpec,
) -> Result<(QueueModel, SelfReactingSpec, Vec<f64>), ModelError> {
    let n = spec.bounds.len();
    if spec.w.len() != n {
        return Err(ModelError::InvalidDistribution(format!(
            "w must have one entry per node ({} vs {})",
            spec.w.len(),
            n
        )));
    }
    for (i, &wi) in spec.w.iter().enumerate() {
        if !(wi > 0.0) {
            return Err(ModelError::NonPositiveRate { name: format!("w[{i}]"), value: wi });
        }
    }
    // unit batches: external e_0 plus one per node
    let mut types: Vec<Vec<u32>> = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let mut v = vec![0u32; n + 1];
        v[k] = 1;
        types.push(v);
    }
    let mut nu = vec![1.0];
    nu.extend_from_slice(&spec.w);
    let z: f64 = nu.iter().sum();
    let routing: Vec<Vec<f64>> =
        (0..=n).map(|_| nu.iter().map(|&v| v / z).collect()).collect();

    let (srs, space) = assemble_batch_movement(
        &spec.bounds,
        &types,
        &routing,
        |phi_x, psi_y, _u| psi_y / phi_x,
        &spec.phi,
        Some(&spec.psi),
    )?;
    let model = build_self_reacting(&srs)?;
    let mut weights = Vec::with_capacity(space.len());
    for (x, st) in space.states().iter().enumerate() {
        let mut wgt = spec.phi[x];
        for (i, &c) in st.coords().iter().enumerate() {
            wgt *= spec.w[i].powi(c as i32);
        }
        weights.push(wgt);
    }
    let closed = Measure::new(space, weights)?.normalize()?;
    let model = model.with_closed_form(closed);
    Ok((model, srs, nu))
}

#[allow(clippy::type_complexity)]
fn assemble_batch_movement(
    bounds: &[u32],
    types: &[Vec<u32>],
    routing: &[Vec<f64>],
    coef: impl Fn(f64, f64, usize) -> f64,
    phi: &[f64],
    psi: Option<&[f64]>,
) -> Result<(SelfReactingSpec, Arc<StateSpace>), ModelError> {
    let n = bounds.len();
    let t = types.len();
    for ty in types {
        if ty.len() != n + 1 {
            return Err(ModelError::InvalidDistribution(format!(
                "batch vector {ty:?} must have length {}",
                n + 1
            )));
        }
    }
    for (u, row) in routing.iter().enumerate() {
        for (u2, &p) in row.iter().enumerate() {
            if p > 0.0 {
                let su: u32 = types[u].iter().sum();
                let sv: u32 = types[u2].iter().sum();
                if su != sv {
                    return Err(ModelError::BatchSizeNotConserved(
                        types[u].clone(),
                        types[u2].clone(),
                    ));
                }
            }
        }
    }
    let space = StateSpace::enumerate_box(bounds);
    let ns = space.len();
    if phi.len() != ns {
        return Err(ModelError::Ctmc(crate::ctmc::CtmcError::SizeMismatch(phi.len(), ns)));
    }
    for (x, &p) in phi.iter().enumerate() {
        if !(p > 0.0) {
            return Err(ModelError::ZeroPhi(x));
        }
    }
    if let Some(psi) = psi {
        if psi.len() != ns {
            return Err(ModelError::Ctmc(crate::ctmc::CtmcError::SizeMismatch(psi.len(), ns)));
        }
        for (y, &p) in psi.iter().enumerate() {
            if !(p > 0.0) {
                return Err(ModelError::ZeroPhi(y));
            }
        }
    }

    let uplus = |u: usize| &types[u][1..];
    let admit_target = |y: &State, u: usize| -> Option<usize> {
        let mut c = y.0.clone();
        for (i, &b) in uplus(u).iter().enumerate() {
            c[i] += b;
            if c[i] > bounds[i] {
                return None;
            }
        }
        space.index_of(&State(c))
    };

    // arrivals: p_au(y, y + u^+) = 1 where the target is inside the box
    let mut arrivals: Vec<Kernel> = (0..t).map(|_| Kernel::zeros(space.clone())).collect();
    for y in 0..ns {
        for (u, arr) in arrivals.iter_mut().enumerate() {
            if let Some(x2) = admit_target(space.state(y), u) {
                arr.add(y, x2, 1.0);
            }
        }
    }

    // per-state effective routing: transfers to a type that cannot be
    // re-admitted at y are rejected and the batch re-enters as itself
    let mut per_state: Vec<Vec<Vec<f64>>> = Vec::with_capacity(ns);
    for y in 0..ns {
        let active: Vec<bool> =
            (0..t).map(|u| admit_target(space.state(y), u).is_some()).collect();
        let mut r_y = vec![vec![0.0; t]; t];
        for u in 0..t {
            if !active[u] {
                r_y[u][u] = 1.0; // row unused: no release of u lands at y
                continue;
            }
            let mut rejected = 0.0;
            for u2 in 0..t {
                if active[u2] {
                    r_y[u][u2] = routing[u][u2];
                } else {
                    rejected += routing[u][u2];
                }
            }
            r_y[u][u] += rejected;
        }
        per_state.push(r_y);
    }

    // departures: release of u from x lands at y = x - u^+
    let mut departures: Vec<RateMatrix> =
        (0..t).map(|_| RateMatrix::zeros(space.clone())).collect();
    for x in 0..ns {
        let xc = space.state(x).coords().to_vec();
        for (u, dep) in departures.iter_mut().enumerate() {
            let mut yc = xc.clone();
            let mut ok = true;
            for (i, &b) in uplus(u).iter().enumerate() {
                if yc[i] < b {
                    ok = false;
                    break;
                }
                yc[i] -= b;
            }
            if !ok {
                continue;
            }
            let y = space.index_of(&State(yc)).expect("inside box");
            let psi_y = psi.map_or(1.0, |p| p[y]);
            let rate = coef(phi[x], psi_y, u);
            if rate > 0.0 {
                dep.add(x, y, rate);
            }
        }
    }

    let names: Vec<String> = types
        .iter()
        .map(|ty| {
            let joined: Vec<String> = ty.iter().map(|c| c.to_string()).collect();
            format!("u({})", joined.join(","))
        })
        .collect();
    let srs = SelfReactingSpec {
        space: space.clone(),
        types: names,
        departures,
        routing: Routing::PerState(per_state),
        arrivals,
        internal: RateMatrix::zeros(space.clone()),
    };
    Ok((srs, space))
}

/// Numerical check of the two sides of the reversibility equivalence for
/// self-reacting systems: (f1) departure inflows proportional to `nu` at
/// every release state, and (f3) the reversed routing built from those
/// inflows keeps `nu` invariant.
#[derive(Clone, Debug)]
pub struct Theorem2Report {
    pub departure_balance: bool,
    pub reversed_invariant: bool,
    pub f1_residual: f64,
    pub f3_residual: f64,
}

pub fn theorem2_report(
    spec: &SelfReactingSpec,
    pi: &Measure,
    nu: &[f64],
    tol: f64,
) -> Theorem2Report {
    let t = spec.types.len();
    let ns = spec.space.len();
    let mut beta = vec![vec![0.0f64; t]; ns];
    let mut support = vec![vec![false; t]; ns];
    for (u, qd) in spec.departures.iter().enumerate() {
        for (x, y, r) in qd.entries() {
            beta[y][u] += pi.weight(x) * r;
            support[y][u] = true;
        }
    }
    let mut f1 = true;
    let mut f1_res = 0.0f64;
    for y in 0..ns {
        let us: Vec<usize> = (0..t).filter(|&u| support[y][u]).collect();
        if us.len() < 2 {
            continue;
        }
        let num: f64 = us.iter().map(|&u| beta[y][u] * nu[u]).sum();
        let den: f64 = us.iter().map(|&u| nu[u] * nu[u]).sum();
        let c = num / den;
        for &u in &us {
            f1_res = f1_res.max(crate::residual(beta[y][u], c * nu[u]));
            if !crate::close(beta[y][u], c * nu[u], tol) {
                f1 = false;
            }
        }
    }
    let mut f3 = true;
    let mut f3_res = 0.0f64;
    for y in 0..ns {
        let us: Vec<usize> = (0..t).filter(|&u| support[y][u]).collect();
        if us.is_empty() {
            continue;
        }
        let r_y = spec.routing.at(y);
        let mut beta_tilde = vec![0.0f64; t];
        for &u in &us {
            for u2 in 0..t {
                beta_tilde[u2] += beta[y][u] * r_y[u][u2];
            }
        }
        for &u in &us {
            let mut acc = 0.0;
            for u2 in 0..t {
                if beta_tilde[u2] > 0.0 {
                    acc += nu[u2] * beta[y][u] * r_y[u][u2] / beta_tilde[u2];
                }
            }
            f3_res = f3_res.max(crate::residual(acc, nu[u]));
            if !crate::close(acc, nu[u], tol) {
                f3 = false;
            }
        }
    }
    Theorem2Report {
        departure_balance: f1,
        reversed_invariant: f3,
        f1_residual: f1_res,
        f3_residual: f3_res,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ctmc::{stationary_distribution, stationary_residual, SolverOptions};

    #[test]
    fn identity_routing_gives_uniform_invariant() {
        let r = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let inv = routing_invariant(&r, 1e-12).unwrap();
        assert!(!inv.irreducible);
        assert_eq!(inv.nu, vec![0.5, 0.5]);
    }

    #[test]
    fn swap_routing_gives_uniform_invariant() {
        let r = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let inv = routing_invariant(&r, 1e-12).unwrap();
        assert!(inv.irreducible);
        assert!((inv.nu[0] - 0.5).abs() < 1e-14);
        assert!((inv.nu[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn random_routing_invariant_matches_power_iteration() {
        // a fixed well-mixed 4-type matrix
        let r = vec![
            vec![0.1, 0.3, 0.4, 0.2],
            vec![0.25, 0.25, 0.25, 0.25],
            vec![0.0, 0.5, 0.2, 0.3],
            vec![0.6, 0.1, 0.1, 0.2],
        ];
        let inv = routing_invariant(&r, 1e-12).unwrap();
        assert!(inv.irreducible);
        // oracle: power iteration
        let mut nu = vec![0.25; 4];
        for _ in 0..10_000 {
            let mut next = vec![0.0; 4];
            for u in 0..4 {
                for v in 0..4 {
                    next[v] += nu[u] * r[u][v];
                }
            }
            nu = next;
        }
        for u in 0..4 {
            assert!((inv.nu[u] - nu[u]).abs() < 1e-12, "u={u}");
        }
    }

    #[test]
    fn transient_types_get_zero_weight() {
        // type 0 leaks into the closed class {1, 2}
        let r = vec![
            vec![0.0, 0.5, 0.5],
            vec![0.0, 0.0, 1.0],
            vec![0.0, 1.0, 0.0],
        ];
        let inv = routing_invariant(&r, 1e-12).unwrap();
        assert!(!inv.irreducible);
        assert_eq!(inv.nu[0], 0.0);
        assert!((inv.nu[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn reversed_routing_reverses_cycles() {
        let r = vec![
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
        ];
        let nu = vec![1.0 / 3.0; 3];
        let rr = reversed_routing(&r, &nu).unwrap();
        assert_eq!(rr[1][0], 1.0);
        assert_eq!(rr[2][1], 1.0);
        assert_eq!(rr[0][2], 1.0);
        // rows stochastic
        for row in &rr {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_routing_is_self_reversed() {
        let r = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let nu = routing_invariant(&r, 1e-12).unwrap().nu;
        let rr = reversed_routing(&r, &nu).unwrap();
        for u in 0..2 {
            for v in 0..2 {
                assert!((rr[u][v] - r[u][v]).abs() < 1e-14);
            }
        }
    }

    fn small_whittle(bounds: &[u32], w: &[f64], seed: u64) -> WhittleSpec {
        // deterministic pseudo-random positive phi/psi
        let space = StateSpace::enumerate_box(bounds);
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        let mut randu = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            0.5 + 1.5 * ((s >> 11) as f64 / (1u64 << 53) as f64)
        };
        let phi: Vec<f64> = (0..space.len()).map(|_| randu()).collect();
        let psi: Vec<f64> = (0..space.len()).map(|_| randu()).collect();
        WhittleSpec { bounds: bounds.to_vec(), w: w.to_vec(), phi, psi }
    }

    #[test]
    fn whittle_closed_form_is_exactly_stationary() {
        let spec = small_whittle(&[6, 6], &[0.45, 0.3], 7);
        let (model, _srs, _nu) = build_whittle(&spec).unwrap();
        let closed = model.closed_form_pi.as_ref().unwrap();
        let res = stationary_residual(model.q(), closed);
        assert!(res < 1e-12, "residual {res}");
        let solved = model.solve(&SolverOptions::default()).unwrap();
        for x in 0..model.space().len() {
            assert!((closed.weight(x) - solved.weight(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn whittle_with_unit_w_is_proportional_to_phi() {
        let mut spec = small_whittle(&[5], &[1.0], 3);
        spec.psi = vec![1.0; spec.psi.len()];
        let (model, _, _) = build_whittle(&spec).unwrap();
        let closed = model.closed_form_pi.as_ref().unwrap();
        let total: f64 = spec.phi.iter().sum();
        for x in 0..model.space().len() {
            assert!((closed.weight(x) - spec.phi[x] / total).abs() < 1e-14);
        }
    }

    #[test]
    fn whittle_theorem2_equivalence_holds() {
        let spec = small_whittle(&[5, 4], &[0.5, 0.7], 11);
        let (model, srs, nu) = build_whittle(&spec).unwrap();
        let pi = model.closed_form_pi.as_ref().unwrap();
        let rep = theorem2_report(&srs, pi, &nu, 1e-10);
        assert!(rep.departure_balance, "f1 residual {}", rep.f1_residual);
        assert!(rep.reversed_invariant, "f3 residual {}", rep.f3_residual);
    }

    #[test]
    fn unbalanced_departures_fail_both_sides() {
        // coupling node 1's release rate to node 2's occupancy is not of
        // the balanced form h(x) k(y) c_u, so both checks must reject
        let spec = small_whittle(&[4, 4], &[0.5, 0.7], 13);
        let (_, mut srs, nu) = build_whittle(&spec).unwrap();
        let space = srs.space.clone();
        let mut coupled = RateMatrix::zeros(space.clone());
        for (x, y, _r) in srs.departures[1].entries() {
            let x2 = space.state(x).coords()[1] as f64;
            coupled.add(x, y, 1.0 + x2);
        }
        srs.departures[1] = coupled;
        let model = build_self_reacting(&srs).unwrap();
        let pi = stationary_distribution(model.q(), &SolverOptions::default()).unwrap();
        let rep = theorem2_report(&srs, &pi, &nu, 1e-8);
        assert!(!rep.departure_balance);
        assert!(!rep.reversed_invariant);
    }

    #[test]
    fn self_reacting_stationary_matches_closed_form() {
        // batch-movement network with nu-reversible routing
        let bounds = [5u32, 5];
        let space = StateSpace::enumerate_box(&bounds);
        let mut s = 42u64;
        let mut randu = move || {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            0.5 + ((s >> 11) as f64 / (1u64 << 53) as f64)
        };
        let phi: Vec<f64> = (0..space.len()).map(|_| randu()).collect();
        let nu_target = [1.0, 0.6, 0.8];
        let z: f64 = nu_target.iter().sum();
        let routing: Vec<Vec<f64>> =
            (0..3).map(|_| nu_target.iter().map(|&v| v / z).collect()).collect();
        let types = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let spec = BatchMovementSpec {
            bounds: bounds.to_vec(),
            types,
            routing,
            phi: phi.clone(),
            psi: None,
        };
        let (model, srs, _nu) = build_batch_movement_network(&spec).unwrap();
        let via_traffic = self_reacting_stationary(&srs, &phi, 1e-9).unwrap();
        let closed = model.closed_form_pi.as_ref().unwrap();
        for x in 0..model.space().len() {
            assert!((via_traffic.weight(x) - closed.weight(x)).abs() < 1e-14);
        }
        let res = stationary_residual(model.q(), closed);
        assert!(res < 1e-12, "residual {res}");
    }

    #[test]
    fn unit_batch_tandem_reduces_to_jackson_generator() {
        // cyclic routing over (external, node1, node2) with equal rates
        let bounds = [4u32, 4];
        let space = StateSpace::enumerate_box(&bounds);
        let phi = vec![1.0; space.len()];
        let types = vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]];
        let routing = vec![
            vec![0.0, 1.0, 0.0], // external batch enters node 1
            vec![0.0, 0.0, 1.0], // node 1 feeds node 2
            vec![1.0, 0.0, 0.0], // node 2 exits
        ];
        let spec = BatchMovementSpec {
            bounds: bounds.to_vec(),
            types,
            routing,
            phi,
            psi: None,
        };
        let (model, _srs, nu) = build_batch_movement_network(&spec).unwrap();
        // uniform invariant: all rates are 1/3
        assert!((nu[0] - 1.0 / 3.0).abs() < 1e-14);
        let c = 1.0 / 3.0;
        // interior transitions match the tandem with lambda = mu1 = mu2 = c
        for (x, st) in model.space().states().iter().enumerate() {
            let (x1, x2) = (st.coords()[0], st.coords()[1]);
            if x1 < 4 {
                let mut t = st.coords().to_vec();
                t[0] += 1;
                let j = model.space().index_of(&State(t)).unwrap();
                assert!((model.q().rate(x, j) - c).abs() < 1e-12, "arrival at {st}");
            }
            if x1 > 0 && x2 < 4 {
                let mut t = st.coords().to_vec();
                t[0] -= 1;
                t[1] += 1;
                let j = model.space().index_of(&State(t)).unwrap();
                assert!((model.q().rate(x, j) - c).abs() < 1e-12, "transfer at {st}");
            }
            if x2 > 0 {
                let mut t = st.coords().to_vec();
                t[1] -= 1;
                let j = model.space().index_of(&State(t)).unwrap();
                assert!((model.q().rate(x, j) - c).abs() < 1e-12, "exit at {st}");
            }
        }
    }

    #[test]
    fn closed_network_conserves_population() {
        // u_0 = 0 for all types: pure internal moves between two nodes
        let bounds = [3u32, 3];
        let space = StateSpace::enumerate_box(&bounds);
        let phi = vec![1.0; space.len()];
        let types = vec![vec![0, 1, 0], vec![0, 0, 1]];
        let routing = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let spec = BatchMovementSpec {
            bounds: bounds.to_vec(),
            types,
            routing,
            phi,
            psi: None,
        };
        let (model, _, _) = build_batch_movement_network(&spec).unwrap();
        for (x, st) in model.space().states().iter().enumerate() {
            let total: u32 = st.coords().iter().sum();
            for (j, _r) in model.q().row(x) {
                let t2: u32 = model.space().state(j).coords().iter().sum();
                assert_eq!(total, t2, "population must be conserved");
            }
        }
    }

    #[test]
    fn batch_size_conservation_enforced() {
        let types = vec![vec![1, 0, 0], vec![0, 1, 1]];
        let routing = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let spec = BatchMovementSpec {
            bounds: vec![3, 3],
            types,
            routing,
            phi: vec![1.0; 16],
            psi: None,
        };
        assert!(matches!(
            build_batch_movement_network(&spec),
            Err(ModelError::BatchSizeNotConserved(_, _))
        ));
    }

    #[test]
    fn balanced_departure_rates_scale_inversely_with_phi() {
        let space = StateSpace::enumerate_box(&[4]);
        let phi: Vec<f64> = (0..5).map(|x| 1.0 + x as f64).collect();
        // release map: g(y, 0) = y + 1
        let rel = |y: usize, _u: usize| if y < 4 { Some(y + 1) } else { None };
        let rates =
            balanced_departure_rates(&space, 1, &phi, |_y, _u| 2.0, rel).unwrap();
        for y in 0..4usize {
            assert!((rates[0].rate(y + 1, y) - 2.0 / phi[y + 1]).abs() < 1e-14);
        }
        // scaling phi by c scales rates by 1/c
        let phi2: Vec<f64> = phi.iter().map(|&p| 3.0 * p).collect();
        let rates2 =
            balanced_departure_rates(&space, 1, &phi2, |_y, _u| 2.0, rel).unwrap();
        for y in 0..4usize {
            assert!((rates2[0].rate(y + 1, y) * 3.0 - rates[0].rate(y + 1, y)).abs() < 1e-14);
        }
    }

    #[test]
    fn triple_family_gamma_is_involution() {
        let spec = small_whittle(&[3, 3], &[0.5, 0.5], 5);
        let (model, _, _) = build_whittle(&spec).unwrap();
        let fam = model.family();
        for label in fam.labels() {
            let dual = fam.gamma(label);
            assert_eq!(fam.gamma(dual), label);
        }
        assert!(fam.validate(1e-12).pass);
    }
}
