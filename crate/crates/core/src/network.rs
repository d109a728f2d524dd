//! Networks of reacting nodes with Markovian routing: the traffic fixed
//! point, the joint generator on the product space, and product-form
//! verification.

use std::collections::BTreeMap;
use std::sync::Arc;

use thiserror::Error;

use crate::balance::{backward_rate_fit, poisson_backward, BalanceError, Label};
use crate::ctmc::{
    stationary_distribution, stationary_residual, CtmcError, Measure, RateMatrix, SolverOptions,
    StateSpace,
};
use crate::models::{build_reacting_system, Kernel, ModelError, ReactingSystemSpec};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("product space too large: {0} states (limit {1})")]
    ProductSpaceTooLarge(usize, usize),
    #[error("node {node} is not quasi-reversible for type {ty}")]
    NodeNotQuasiReversible { node: usize, ty: String },
    #[error("traffic iteration did not converge after {iterations} iterations (change {change:.3e})")]
    NoConvergence { iterations: usize, change: f64 },
    #[error("bad routing: {0}")]
    BadRouting(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
    #[error(transparent)]
    Balance(#[from] BalanceError),
}

const MAX_PRODUCT_STATES: usize = 2_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NodeRole {
    /// The external world, node 0: a one-point state space whose
    /// "departures" are the exogenous arrival streams and whose arrivals
    /// (customers leaving the network) cause no state change.
    Source,
    Queue,
}

pub struct NodeSpec {
    pub id: usize,
    pub name: String,
    pub role: NodeRole,
    pub spec: ReactingSystemSpec,
    /// Truncation-corrupted states of this node's box (see
    /// [`crate::models::QueueModel::interior_mask`]).
    pub boundary: Vec<bool>,
}

impl NodeSpec {
    pub fn interior_mask(&self) -> Option<Vec<bool>> {
        if self.boundary.iter().any(|&b| b) {
            Some(self.boundary.iter().map(|&b| !b).collect())
        } else {
            None
        }
    }
}

/// Routing among (node, type) pairs: `r(i u_i, j u_j)`.
#[derive(Clone, Debug, Default)]
pub struct RoutingKernel {
    entries: BTreeMap<(usize, String), BTreeMap<(usize, String), f64>>,
}

impl RoutingKernel {
    pub fn new() -> RoutingKernel {
        RoutingKernel::default()
    }

    pub fn add(&mut self, from: (usize, &str), to: (usize, &str), p: f64) {
        assert!((0.0..=1.0 + 1e-12).contains(&p));
        if p > 0.0 {
            *self
                .entries
                .entry((from.0, from.1.to_string()))
                .or_default()
                .entry((to.0, to.1.to_string()))
                .or_insert(0.0) += p;
        }
    }

    pub fn row(
        &self,
        from: (usize, &str),
    ) -> impl Iterator<Item = (&(usize, String), f64)> + '_ {
        self.entries
            .get(&(from.0, from.1.to_string()))
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, &p)| (k, p)))
    }

    pub fn prob(&self, from: (usize, &str), to: (usize, &str)) -> f64 {
        self.entries
            .get(&(from.0, from.1.to_string()))
            .and_then(|m| m.get(&(to.0, to.1.to_string())))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn validate(&self, nodes: &[NodeSpec]) -> Result<(), NetworkError> {
        for node in nodes {
            for ty in &node.spec.types {
                let sum: f64 = self.row((node.id, ty)).map(|(_, p)| p).sum();
                if (sum - 1.0).abs() > 1e-9 {
                    return Err(NetworkError::BadRouting(format!(
                        "row ({}, {ty}) sums to {sum}",
                        node.id
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrafficOptions {
    pub damping: f64,
    /// Residual tolerance for the traffic equation and the per-node
    /// quasi-reversibility test.
    pub tol: f64,
    /// Relative-change stopping threshold for the fixed point.
    pub rel_stop: f64,
    pub max_iter: usize,
    /// With `strict`, a node failing quasi-reversibility aborts the solve;
    /// otherwise the least-squares rate is used and the failure recorded.
    pub strict: bool,
    pub solver: SolverOptions,
}

impl Default for TrafficOptions {
    fn default() -> Self {
        TrafficOptions {
            damping: 0.5,
            tol: 1e-10,
            rel_stop: 1e-14,
            max_iter: 2000,
            strict: true,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrafficSolution {
    pub alpha: BTreeMap<(usize, String), f64>,
    pub beta: BTreeMap<(usize, String), f64>,
    pub node_pis: BTreeMap<usize, Measure>,
    pub quasi_ok: BTreeMap<usize, bool>,
    pub converged: bool,
    /// Max relative residual of the traffic equation at the fixed point.
    pub residual: f64,
    pub iterations: usize,
}

/// Single-node generator for a reacting node fed Poisson arrivals `alpha`.
pub fn node_in_isolation(
    node: &NodeSpec,
    alpha: &BTreeMap<String, f64>,
) -> Result<RateMatrix, ModelError> {
    Ok(build_reacting_system(&node.spec, alpha)?.q().clone())
}

fn departure_label(node: &NodeSpec, ty: &str) -> Label {
    if node.spec.types.len() == 1 && ty == "c" {
        Label::departure()
    } else {
        Label::departure_of(ty)
    }
}

/// Damped successive substitution for the traffic fixed point: given
/// per-node arrival rates, solve each node in isolation, read off the
/// departure rates `beta` from the backward Poisson criterion, and map
/// them through the routing to new arrival rates.
pub fn solve_traffic(
    nodes: &[NodeSpec],
    routing: &RoutingKernel,
    opts: &TrafficOptions,
) -> Result<TrafficSolution, NetworkError> {
    routing.validate(nodes)?;
    let keys: Vec<(usize, String)> = nodes
        .iter()
        .flat_map(|n| n.spec.types.iter().map(move |t| (n.id, t.clone())))
        .collect();

    // start from the direct source inflow, floored to stay positive
    let source_total: f64 = nodes
        .iter()
        .filter(|n| n.role == NodeRole::Source)
        .flat_map(|n| n.spec.departures.values())
        .map(|d| d.exit_rates().iter().sum::<f64>())
        .sum();
    let floor = 0.1 * source_total.max(1e-6);
    let mut alpha: BTreeMap<(usize, String), f64> = BTreeMap::new();
    for key in &keys {
        let mut direct = 0.0;
        for node in nodes.iter().filter(|n| n.role == NodeRole::Source) {
            for ty in &node.spec.types {
                let lam: f64 = node.spec.departures[ty].exit_rates().iter().sum();
                direct += lam * routing.prob((node.id, ty), (key.0, &key.1));
            }
        }
        alpha.insert(key.clone(), direct.max(floor));
    }

    let mut beta: BTreeMap<(usize, String), f64> = BTreeMap::new();
    let mut node_pis: BTreeMap<usize, Measure> = BTreeMap::new();
    let mut quasi_ok: BTreeMap<usize, bool> = BTreeMap::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iter {
        iterations += 1;
        // per-node solve and departure-rate extraction
        beta.clear();
        for node in nodes {
            let a_map: BTreeMap<String, f64> = node
                .spec
                .types
                .iter()
                .map(|t| (t.clone(), alpha[&(node.id, t.clone())]))
                .collect();
            let model = build_reacting_system(&node.spec, &a_map)?;
            let pi = stationary_distribution(model.q(), &opts.solver)?;
            let mask = node.interior_mask();
            let mut ok = true;
            for ty in &node.spec.types {
                let label = departure_label(node, ty);
                let part = model.family().part(&label)?;
                let b = match poisson_backward(part, &pi, opts.tol, mask.as_deref())? {
                    Some(b) => b,
                    None => {
                        ok = false;
                        if opts.strict {
                            return Err(NetworkError::NodeNotQuasiReversible {
                                node: node.id,
                                ty: ty.clone(),
                            });
                        }
                        backward_rate_fit(part, &pi, mask.as_deref())?.unwrap_or(0.0)
                    }
                };
                beta.insert((node.id, ty.clone()), b);
            }
            quasi_ok.insert(node.id, ok);
            node_pis.insert(node.id, pi);
        }
        // route departures to new arrivals
        let mut change = 0.0f64;
        for key in &keys {
            let routed: f64 = keys
                .iter()
                .map(|from| beta[from] * routing.prob((from.0, &from.1), (key.0, &key.1)))
                .sum();
            let old = alpha[key];
            let new = (1.0 - opts.damping) * old + opts.damping * routed;
            change = change.max((new - old).abs() / old.abs().max(1e-300));
            alpha.insert(key.clone(), new);
        }
        if change <= opts.rel_stop {
            converged = true;
            break;
        }
    }

    // residual of the traffic equation at the final iterate
    let mut residual = 0.0f64;
    for key in &keys {
        let routed: f64 = keys
            .iter()
            .map(|from| beta[from] * routing.prob((from.0, &from.1), (key.0, &key.1)))
            .sum();
        residual = residual.max(crate::residual(alpha[key], routed));
    }
    if !converged {
        return Err(NetworkError::NoConvergence { iterations, change: residual });
    }
    Ok(TrafficSolution {
        alpha,
        beta,
        node_pis,
        quasi_ok,
        converged,
        residual,
        iterations,
    })
}

/// Index arithmetic for the product of the node spaces, last node varying
/// fastest (matching [`StateSpace::product`]).
struct ProductIndex {
    sizes: Vec<usize>,
    strides: Vec<usize>,
}

impl ProductIndex {
    fn new(nodes: &[NodeSpec]) -> ProductIndex {
        let sizes: Vec<usize> = nodes.iter().map(|n| n.spec.space.len()).collect();
        let mut strides = vec![1usize; sizes.len()];
        for i in (0..sizes.len().saturating_sub(1)).rev() {
            strides[i] = strides[i + 1] * sizes[i + 1];
        }
        ProductIndex { sizes, strides }
    }

    fn total(&self) -> usize {
        self.sizes.iter().product()
    }

    fn component(&self, joint: usize, i: usize) -> usize {
        (joint / self.strides[i]) % self.sizes[i]
    }

    fn shift(&self, joint: usize, i: usize, from: usize, to: usize) -> usize {
        joint - from * self.strides[i] + to * self.strides[i]
    }
}

/// Assembles the network generator on the product space: departures of
/// node `i` routed to arrivals of node `j`, including the same-node
/// convolution branch, plus per-node internal rates.
pub fn joint_generator(
    nodes: &[NodeSpec],
    routing: &RoutingKernel,
) -> Result<(Arc<StateSpace>, RateMatrix), NetworkError> {
    routing.validate(nodes)?;
    let idx = ProductIndex::new(nodes);
    if idx.total() > MAX_PRODUCT_STATES {
        return Err(NetworkError::ProductSpaceTooLarge(idx.total(), MAX_PRODUCT_STATES));
    }
    let spaces: Vec<Arc<StateSpace>> = nodes.iter().map(|n| n.spec.space.clone()).collect();
    let space = StateSpace::product(&spaces);
    let mut q = RateMatrix::zeros(space.clone());

    for joint in 0..space.len() {
        for (i, node) in nodes.iter().enumerate() {
            let xi = idx.component(joint, i);
            // internal transitions of node i
            for (xi2, r) in node.spec.internal.row(xi) {
                q.add(joint, idx.shift(joint, i, xi, xi2), r);
            }
            for ty in &node.spec.types {
                for (yi, drate) in node.spec.departures[ty].row(xi) {
                    for ((j, v), r) in routing.row((node.id, ty)) {
                        let target = &nodes[*j];
                        let kernel = &target.spec.arrivals[v];
                        if *j == i {
                            // departure and re-admission convolve at node i
                            check_row(target, v, kernel, yi)?;
                            for (xi2, p) in kernel.row(yi) {
                                q.add(joint, idx.shift(joint, i, xi, xi2), drate * r * p);
                            }
                        } else {
                            let xj = idx.component(joint, *j);
                            check_row(target, v, kernel, xj)?;
                            for (xj2, p) in kernel.row(xj) {
                                let mid = idx.shift(joint, i, xi, yi);
                                q.add(joint, idx.shift(mid, *j, xj, xj2), drate * r * p);
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((space, q))
}

fn check_row(node: &NodeSpec, ty: &str, kernel: &Kernel, row: usize) -> Result<(), NetworkError> {
    let sum = kernel.row_sum(row);
    if (sum - 1.0).abs() > 1e-9 {
        return Err(NetworkError::Model(ModelError::KernelNotStochastic {
            ty: format!("node {} type {ty}", node.id),
            row,
            sum,
        }));
    }
    Ok(())
}

/// The product measure `pi(x) = prod_i pi_i(x_i)` on the joint space.
pub fn product_form_distribution(
    nodes: &[NodeSpec],
    traffic: &TrafficSolution,
    joint_space: &Arc<StateSpace>,
) -> Result<Measure, NetworkError> {
    let idx = ProductIndex::new(nodes);
    let mut weights = Vec::with_capacity(joint_space.len());
    for joint in 0..joint_space.len() {
        let mut w = 1.0;
        for (i, node) in nodes.iter().enumerate() {
            w *= traffic.node_pis[&node.id].weight(idx.component(joint, i));
        }
        weights.push(w);
    }
    Ok(Measure::new(joint_space.clone(), weights)?.normalize()?)
}

#[derive(Clone, Debug)]
pub struct ProductFormReport {
    pub tv_distance: f64,
    /// Max-norm residual of the product measure in the joint balance
    /// equation.
    pub residual: f64,
    /// Product-measure mass on states with a truncation-affected node
    /// coordinate; the documented bound on the truncation leak.
    pub leak_bound: f64,
    pub quasi_ok: BTreeMap<usize, bool>,
    pub alpha: BTreeMap<(usize, String), f64>,
    pub beta: BTreeMap<(usize, String), f64>,
    pub pass: bool,
}

/// Certifies the product form numerically: solves the traffic fixed point
/// (non-strict), solves the joint chain, and compares in total variation.
pub fn verify_product_form(
    nodes: &[NodeSpec],
    routing: &RoutingKernel,
    tol: f64,
    opts: &TrafficOptions,
) -> Result<ProductFormReport, NetworkError> {
    let mut topts = opts.clone();
    topts.strict = false;
    let traffic = solve_traffic(nodes, routing, &topts)?;
    let (space, q) = joint_generator(nodes, routing)?;
    let joint_pi = stationary_distribution(&q, &topts.solver)?;
    let product = product_form_distribution(nodes, &traffic, &space)?;
    let tv = joint_pi.tv_distance(&product);
    let residual = stationary_residual(&q, &product);

    let idx = ProductIndex::new(nodes);
    let mut leak = 0.0;
    for joint in 0..space.len() {
        let affected = nodes
            .iter()
            .enumerate()
            .any(|(i, n)| n.boundary.get(idx.component(joint, i)).copied().unwrap_or(false));
        if affected {
            leak += product.weight(joint);
        }
    }
    let pass = tv <= tol + leak;
    Ok(ProductFormReport {
        tv_distance: tv,
        residual,
        leak_bound: leak,
        quasi_ok: traffic.quasi_ok.clone(),
        alpha: traffic.alpha.clone(),
        beta: traffic.beta.clone(),
        pass,
    })
}

/// Jackson network builder: `lambda[i]` exogenous Poisson rate into node
/// `i+1`, `mu[i]` and `s[i]` the service rate and server count, `p[i][j]`
/// the routing matrix among queueing nodes (substochastic rows; the slack
/// exits to node 0). Per-node buffers are truncated at `bound[i]` with
/// blocked arrivals kept as self-loops.
pub fn build_jackson(
    lambda: &[f64],
    mu: &[f64],
    s: &[u32],
    p: &[Vec<f64>],
    bound: &[u32],
) -> Result<(Vec<NodeSpec>, RoutingKernel), NetworkError> {
    let n = mu.len();
    if lambda.len() != n || s.len() != n || p.len() != n || bound.len() != n {
        return Err(NetworkError::BadRouting(
            "lambda, mu, s, p, bound must all have one entry per node".into(),
        ));
    }
    let lam_total: f64 = lambda.iter().sum();
    if !(lam_total > 0.0) {
        return Err(NetworkError::BadRouting("total source rate must be positive".into()));
    }
    for (i, row) in p.iter().enumerate() {
        if row.len() != n {
            return Err(NetworkError::BadRouting(format!("routing row {i} has wrong length")));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|&x| x < 0.0) || sum > 1.0 + 1e-12 {
            return Err(NetworkError::BadRouting(format!(
                "routing row {i} must be substochastic (sum {sum})"
            )));
        }
    }

    let mut nodes = Vec::with_capacity(n + 1);
    // node 0: external source on a one-point space
    let source_space = StateSpace::singleton();
    let mut src_dep = RateMatrix::zeros(source_space.clone());
    src_dep.add(0, 0, lam_total);
    let mut src_arr = Kernel::zeros(source_space.clone());
    src_arr.add(0, 0, 1.0);
    nodes.push(NodeSpec {
        id: 0,
        name: "source".into(),
        role: NodeRole::Source,
        spec: ReactingSystemSpec::single_type(source_space, src_arr, src_dep),
        boundary: vec![false],
    });
    for i in 0..n {
        if !(mu[i] > 0.0) || s[i] == 0 {
            return Err(NetworkError::Model(ModelError::NonPositiveRate {
                name: format!("mu[{i}]"),
                value: mu[i],
            }));
        }
        let cap = bound[i] as usize;
        let space = StateSpace::enumerate_box(&[bound[i]]);
        let mut arr = Kernel::zeros(space.clone());
        for x in 0..cap {
            arr.add(x, x + 1, 1.0);
        }
        arr.add(cap, cap, 1.0); // blocked arrival at a full buffer
        let mut dep = RateMatrix::zeros(space.clone());
        for x in 1..=cap {
            dep.add(x, x - 1, (x as u32).min(s[i]) as f64 * mu[i]);
        }
        let mut boundary = vec![false; cap + 1];
        boundary[cap] = true;
        nodes.push(NodeSpec {
            id: i + 1,
            name: format!("node{}", i + 1),
            role: NodeRole::Queue,
            spec: ReactingSystemSpec::single_type(space, arr, dep),
            boundary,
        });
    }

    let mut routing = RoutingKernel::new();
    for i in 0..n {
        routing.add((0, "c"), (i + 1, "c"), lambda[i] / lam_total);
    }
    for i in 0..n {
        let mut exit = 1.0;
        for j in 0..n {
            if p[i][j] > 0.0 {
                routing.add((i + 1, "c"), (j + 1, "c"), p[i][j]);
                exit -= p[i][j];
            }
        }
        if exit > 1e-12 {
            routing.add((i + 1, "c"), (0, "c"), exit);
        }
    }
    routing.validate(&nodes)?;
    Ok((nodes, routing))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reversal::reverse;

    fn tandem() -> (Vec<NodeSpec>, RoutingKernel) {
        build_jackson(
            &[1.0, 0.0],
            &[2.0, 4.0],
            &[1, 1],
            &[vec![0.0, 1.0], vec![0.0, 0.0]],
            &[20, 20],
        )
        .unwrap()
    }

    #[test]
    fn tandem_traffic_is_flow_conservation() {
        let (nodes, routing) = tandem();
        let sol = solve_traffic(&nodes, &routing, &TrafficOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.alpha[&(1, "c".into())] - 1.0).abs() < 1e-12);
        assert!((sol.alpha[&(2, "c".into())] - 1.0).abs() < 1e-12);
        assert!((sol.beta[&(1, "c".into())] - 1.0).abs() < 1e-12);
        assert!(sol.residual < 1e-12);
        assert!(sol.quasi_ok.values().all(|&ok| ok));
    }

    #[test]
    fn feedback_doubles_the_internal_flow() {
        // source rate 1 into node 1, p11 = 0.5, exit 0.5: alpha = 2
        let (nodes, routing) =
            build_jackson(&[1.0], &[4.0], &[1], &[vec![0.5]], &[25]).unwrap();
        let sol = solve_traffic(&nodes, &routing, &TrafficOptions::default()).unwrap();
        assert!((sol.alpha[&(1, "c".into())] - 2.0).abs() < 1e-12);
        assert!((sol.beta[&(1, "c".into())] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn jackson_alpha_equals_beta() {
        let (nodes, routing) = build_jackson(
            &[0.7, 0.3],
            &[3.0, 5.0],
            &[1, 2],
            &[vec![0.2, 0.3], vec![0.4, 0.1]],
            &[18, 18],
        )
        .unwrap();
        let sol = solve_traffic(&nodes, &routing, &TrafficOptions::default()).unwrap();
        for (key, &a) in &sol.alpha {
            if key.0 == 0 {
                continue;
            }
            assert!((a - sol.beta[key]).abs() < 1e-11, "{key:?}");
        }
        // direct linear-equation oracle: alpha = lambda + P^T alpha
        let p = [[0.2, 0.3], [0.4, 0.1]];
        let lambda = [0.7, 0.3];
        let mut a = [1.0f64, 1.0];
        for _ in 0..500 {
            let next = [
                lambda[0] + p[0][0] * a[0] + p[1][0] * a[1],
                lambda[1] + p[0][1] * a[0] + p[1][1] * a[1],
            ];
            a = next;
        }
        assert!((sol.alpha[&(1, "c".into())] - a[0]).abs() < 1e-12);
        assert!((sol.alpha[&(2, "c".into())] - a[1]).abs() < 1e-12);
    }

    #[test]
    fn joint_generator_of_tandem_has_expected_rates() {
        let (nodes, routing) = tandem();
        let (space, q) = joint_generator(&nodes, &routing).unwrap();
        assert_eq!(space.len(), 21 * 21);
        // from (3, 5): arrival 1.0 to (4,5); transfer 2.0 to (2,6); exit 4.0 to (3,4)
        let at = |a: u32, b: u32| space.index_of(&crate::ctmc::State(vec![a, b])).unwrap();
        assert!((q.rate(at(3, 5), at(4, 5)) - 1.0).abs() < 1e-15);
        assert!((q.rate(at(3, 5), at(2, 6)) - 2.0).abs() < 1e-15);
        assert!((q.rate(at(3, 5), at(3, 4)) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn self_routing_branch_creates_convolved_transitions() {
        let (nodes, routing) =
            build_jackson(&[1.0], &[4.0], &[1], &[vec![0.5]], &[10]).unwrap();
        let (space, q) = joint_generator(&nodes, &routing).unwrap();
        let at = |a: u32| space.index_of(&crate::ctmc::State(vec![a])).unwrap();
        // service 4.0 splits: 2.0 re-enters (self-loop via y = x-1), 2.0 exits
        assert!((q.rate(at(3), at(3)) - 2.0).abs() < 1e-15);
        assert!((q.rate(at(3), at(2)) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn tandem_product_form_certifies() {
        let (nodes, routing) = tandem();
        let report =
            verify_product_form(&nodes, &routing, 1e-6, &TrafficOptions::default()).unwrap();
        assert!(report.pass, "tv = {}", report.tv_distance);
        assert!(report.tv_distance < 1e-6);
        assert!(report.quasi_ok.values().all(|&ok| ok));
        // closed form marginals: geometric 0.5 and 0.25
        let (space, _) = joint_generator(&nodes, &routing).unwrap();
        let sol = solve_traffic(&nodes, &routing, &TrafficOptions::default()).unwrap();
        let product = product_form_distribution(&nodes, &sol, &space).unwrap();
        let at = |a: u32, b: u32| space.index_of(&crate::ctmc::State(vec![a, b])).unwrap();
        let expect = |x1: i32, x2: i32| {
            0.5 * 0.5f64.powi(x1) * 0.75 * 0.25f64.powi(x2)
        };
        for (x1, x2) in [(0, 0), (1, 0), (0, 1), (3, 2)] {
            let got = product.weight(at(x1 as u32, x2 as u32));
            assert!((got - expect(x1, x2)).abs() < 1e-6, "({x1},{x2}): {got}");
        }
    }

    #[test]
    fn reversed_network_is_network_of_reversed_pieces() {
        // Gamma-reversibility at the network level: reversing the joint
        // chain under the product measure reproduces the generator
        // assembled from reversed node pieces and reversed routing.
        let (nodes, routing) = build_jackson(
            &[1.0, 0.0],
            &[3.0, 4.0],
            &[1, 1],
            &[vec![0.25, 0.5], vec![0.2, 0.1]],
            &[25, 25],
        )
        .unwrap();
        let sol = solve_traffic(&nodes, &routing, &TrafficOptions::default()).unwrap();
        let (space, q) = joint_generator(&nodes, &routing).unwrap();
        let product = product_form_distribution(&nodes, &sol, &space).unwrap();
        let reversed_joint = reverse(&q, &product).unwrap();

        // reversed node pieces
        let mut rev_nodes = Vec::new();
        for node in &nodes {
            let pi = &sol.node_pis[&node.id];
            let ns = node.spec.space.len();
            let ty = "c".to_string();
            let beta = sol.beta[&(node.id, ty.clone())];
            let alpha = sol.alpha[&(node.id, ty.clone())];
            // p~_a(x, x') = pi(x') q_d(x', x) / (beta pi(x)), completed with
            // a diagonal remainder where truncation leaks probability
            let mut arr = Kernel::zeros(node.spec.space.clone());
            for x in 0..ns {
                let mut total = 0.0;
                for (x2p, xp, r) in node.spec.departures[&ty].entries() {
                    if xp == x && pi.weight(x) > 0.0 {
                        let p = pi.weight(x2p) * r / (beta * pi.weight(x));
                        arr.add(x, x2p, p.min(1.0));
                        total += p;
                    }
                }
                if total < 1.0 {
                    arr.add(x, x, 1.0 - total.min(1.0));
                }
            }
            // q~_d(x, x') = pi(x') alpha p_a(x', x) / pi(x)
            let mut dep = RateMatrix::zeros(node.spec.space.clone());
            for (x2p, xp, p) in node.spec.arrivals[&ty].entries() {
                if pi.weight(xp) > 0.0 {
                    dep.add(xp, x2p, pi.weight(x2p) * alpha * p / pi.weight(xp));
                }
            }
            rev_nodes.push(NodeSpec {
                id: node.id,
                name: node.name.clone(),
                role: node.role,
                spec: ReactingSystemSpec::single_type(node.spec.space.clone(), arr, dep),
                boundary: node.boundary.clone(),
            });
        }
        // r~(i u, j v) = beta^{(j)}_v / alpha^{(i)}_u r(j v, i u)
        let mut rev_routing = RoutingKernel::new();
        let keys: Vec<(usize, String)> =
            nodes.iter().map(|n| (n.id, "c".to_string())).collect();
        for from in &keys {
            for to in &keys {
                let r = routing.prob((to.0, &to.1), (from.0, &from.1));
                if r > 0.0 {
                    let val = sol.beta[to] / sol.alpha[from] * r;
                    rev_routing.add((from.0, &from.1), (to.0, &to.1), val);
                }
            }
        }
        let (_, reassembled) = joint_generator(&rev_nodes, &rev_routing).unwrap();
        // stationary flows agree up to truncation leakage at the buffer
        // caps (rates themselves differ there: the truncated reassembly
        // must block reversed arrivals at a full buffer)
        let mut worst_flow = 0.0f64;
        for x in 0..space.len() {
            for (x2, r) in reversed_joint.row(x) {
                worst_flow =
                    worst_flow.max(product.weight(x) * (r - reassembled.rate(x, x2)).abs());
            }
            for (x2, r) in reassembled.row(x) {
                worst_flow =
                    worst_flow.max(product.weight(x) * (r - reversed_joint.rate(x, x2)).abs());
            }
        }
        assert!(worst_flow < 1e-6, "max flow diff {worst_flow}");
        // and exact (to rounding) well inside the box
        let at = |a: u32, b: u32| space.index_of(&crate::ctmc::State(vec![a, b])).unwrap();
        for (from, to) in [
            ((2, 3), (3, 3)),
            ((2, 3), (2, 2)),
            ((3, 3), (2, 4)),
            ((4, 1), (4, 2)),
        ] {
            let i = at(from.0, from.1);
            let j = at(to.0, to.1);
            assert!(
                (reversed_joint.rate(i, j) - reassembled.rate(i, j)).abs() < 1e-9,
                "entry ({from:?} -> {to:?})"
            );
        }
    }

    #[test]
    fn broken_node_fails_verification() {
        // replace node 1 by a batch-service queue counting all departures
        let (mut nodes, routing) = tandem();
        let batch = crate::models::build_batch_service(
            1.0,
            1.0,
            &[0.5, 0.5],
            crate::models::DepartureCounting::All,
            20,
        )
        .unwrap();
        let space = batch.space().clone();
        let mut arr = Kernel::zeros(space.clone());
        for x in 0..20usize {
            arr.add(x, x + 1, 1.0);
        }
        arr.add(20, 20, 1.0);
        let dep = batch.family().parts()[&Label::departure()].clone();
        nodes[1] = NodeSpec {
            id: 1,
            name: "batch".into(),
            role: NodeRole::Queue,
            spec: ReactingSystemSpec::single_type(space, arr, dep),
            boundary: nodes[1].boundary.clone(),
        };
        // strict traffic solve refuses
        let strict = solve_traffic(&nodes, &routing, &TrafficOptions::default());
        assert!(matches!(
            strict,
            Err(NetworkError::NodeNotQuasiReversible { node: 1, .. })
        ));
        // non-strict verification reports a large TV distance
        let report =
            verify_product_form(&nodes, &routing, 1e-6, &TrafficOptions::default()).unwrap();
        assert!(!report.pass);
        assert!(!report.quasi_ok[&1]);
        assert!(report.tv_distance > 1e-3, "tv = {}", report.tv_distance);
    }

    #[test]
    fn bad_routing_rejected() {
        let err = build_jackson(&[1.0], &[2.0], &[1], &[vec![1.2]], &[10]);
        assert!(matches!(err, Err(NetworkError::BadRouting(_))));
    }

    #[test]
    fn single_node_product_form_is_node_distribution() {
        let (nodes, routing) =
            build_jackson(&[1.0], &[2.0], &[1], &[vec![0.0]], &[30]).unwrap();
        let sol = solve_traffic(&nodes, &routing, &TrafficOptions::default()).unwrap();
        let (space, _) = joint_generator(&nodes, &routing).unwrap();
        let product = product_form_distribution(&nodes, &sol, &space).unwrap();
        let node_pi = &sol.node_pis[&1];
        for x in 0..space.len() {
            assert!((product.weight(x) - node_pi.weight(x)).abs() < 1e-14);
        }
    }
}
