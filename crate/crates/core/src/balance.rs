//! Balance checkers: local balance over pair partitions, test-function
//! balance, sub-transition families with a label permutation, Poisson
//! counting criteria, and quasi-reversibility.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use thiserror::Error;

use crate::close;
use crate::ctmc::{CtmcError, Measure, RateMatrix};
use crate::reversal::reverse;

#[derive(Debug, Error)]
pub enum BalanceError {
    #[error("blocks overlap at pair ({0}, {1})")]
    OverlappingBlocks(usize, usize),
    #[error("test function {name} is negative at ({i}, {j}): {value}")]
    NegativeFunctionValue { name: String, i: usize, j: usize, value: f64 },
    #[error("label not in family: {0}")]
    UnknownLabel(Label),
    #[error("gamma is not a permutation of the family's labels")]
    BadPermutation,
    #[error("state {0} has zero weight but positive incoming flow {1}")]
    ZeroWeightState(usize, f64),
    #[error(transparent)]
    Ctmc(#[from] CtmcError),
}

/// A label naming one part of a sub-transition family ("a", "d:u", ...).
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Label(pub String);

impl Label {
    pub fn new(s: impl Into<String>) -> Label {
        Label(s.into())
    }

    pub fn arrival() -> Label {
        Label("a".into())
    }

    pub fn departure() -> Label {
        Label("d".into())
    }

    pub fn arrival_of(ty: &str) -> Label {
        Label(format!("a:{ty}"))
    }

    pub fn departure_of(ty: &str) -> Label {
        Label(format!("d:{ty}"))
    }

    /// Label of a release-transfer-admit composition `(u, y, u')`.
    pub fn transfer(u: &str, y: usize, u2: &str) -> Label {
        Label(format!("{u}>y{y}>{u2}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

/// Disjoint named sets of ordered state pairs.
pub struct PairPartition {
    blocks: Vec<(String, BTreeSet<(usize, usize)>)>,
}

impl PairPartition {
    pub fn new(
        blocks: Vec<(String, BTreeSet<(usize, usize)>)>,
    ) -> Result<PairPartition, BalanceError> {
        let mut seen = BTreeSet::new();
        for (_, b) in &blocks {
            for &p in b {
                if !seen.insert(p) {
                    return Err(BalanceError::OverlappingBlocks(p.0, p.1));
                }
            }
        }
        Ok(PairPartition { blocks })
    }

    /// One singleton block per ordered pair in the support of `q` and its
    /// transpose; local balance w.r.t. this partition is detailed balance.
    pub fn singletons(q: &RateMatrix) -> PairPartition {
        let mut pairs = BTreeSet::new();
        for (i, j, _) in q.entries() {
            pairs.insert((i, j));
            pairs.insert((j, i));
        }
        PairPartition {
            blocks: pairs
                .into_iter()
                .map(|(i, j)| (format!("({i},{j})"), BTreeSet::from([(i, j)])))
                .collect(),
        }
    }

    pub fn blocks(&self) -> &[(String, BTreeSet<(usize, usize)>)] {
        &self.blocks
    }
}

/// A nonnegative test function on ordered pairs of state indices.
pub struct TestFunction {
    pub name: String,
    f: Box<dyn Fn(usize, usize) -> f64 + Send + Sync>,
}

impl TestFunction {
    pub fn new(
        name: impl Into<String>,
        f: impl Fn(usize, usize) -> f64 + Send + Sync + 'static,
    ) -> TestFunction {
        TestFunction { name: name.into(), f: Box::new(f) }
    }

    pub fn eval(&self, i: usize, j: usize) -> f64 {
        (self.f)(i, j)
    }

    /// Indicator of a pair set.
    pub fn indicator(name: impl Into<String>, pairs: BTreeSet<(usize, usize)>) -> TestFunction {
        TestFunction::new(name, move |i, j| if pairs.contains(&(i, j)) { 1.0 } else { 0.0 })
    }
}

pub struct TestFunctionSet {
    pub functions: Vec<TestFunction>,
}

/// Verdict for one block or one test function.
#[derive(Clone, Debug)]
pub struct FlowVerdict {
    pub name: String,
    pub forward_flow: f64,
    pub backward_flow: f64,
    pub residual: f64,
    pub pass: bool,
}

#[derive(Clone, Debug)]
pub struct LocalBalanceReport {
    /// Max-norm residual of the global balance equation for (q, pi); the
    /// checker warns (rather than fails) when pi is not stationary.
    pub stationary_residual: f64,
    pub stationary_warning: bool,
    pub blocks: Vec<FlowVerdict>,
    pub pass: bool,
}

/// Checks aggregate flow balance `sum_C pi(x) q(x,x') = sum_C pi(x') q(x',x)`
/// per block of the partition.
pub fn check_local_balance(
    q: &RateMatrix,
    pi: &Measure,
    w: &PairPartition,
    tol: f64,
) -> LocalBalanceReport {
    let stationary_residual = crate::ctmc::stationary_residual(q, pi);
    let mut blocks = Vec::with_capacity(w.blocks().len());
    let mut pass = true;
    for (name, pairs) in w.blocks() {
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for &(x, x2) in pairs {
            fwd += pi.weight(x) * q.rate(x, x2);
            bwd += pi.weight(x2) * q.rate(x2, x);
        }
        let ok = close(fwd, bwd, tol);
        pass &= ok;
        blocks.push(FlowVerdict {
            name: name.clone(),
            forward_flow: fwd,
            backward_flow: bwd,
            residual: crate::residual(fwd, bwd),
            pass: ok,
        });
    }
    LocalBalanceReport {
        stationary_residual,
        stationary_warning: stationary_residual > tol.max(1e-9),
        blocks,
        pass,
    }
}

/// Test-function balance:
/// `sum pi(x) q(x,x') f(x,x') = sum pi(x') q(x',x) f(x,x')` per function.
pub fn check_test_function_balance(
    q: &RateMatrix,
    pi: &Measure,
    g: &TestFunctionSet,
    tol: f64,
) -> Result<Vec<FlowVerdict>, BalanceError> {
    let mut out = Vec::with_capacity(g.functions.len());
    for tf in &g.functions {
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        // both sums range over the pairs where q or its transpose is
        // positive; f is evaluated lazily and checked for negativity there
        for (x, x2, r) in q.entries() {
            let v = tf.eval(x, x2);
            if v < 0.0 {
                return Err(BalanceError::NegativeFunctionValue {
                    name: tf.name.clone(),
                    i: x,
                    j: x2,
                    value: v,
                });
            }
            fwd += pi.weight(x) * r * v;
            // the same entry q(x,x2) appears in the backward sum as
            // q(x',x) for the pair (x2, x)
            bwd += pi.weight(x) * r * tf.eval(x2, x);
        }
        let ok = close(fwd, bwd, tol);
        out.push(FlowVerdict {
            name: tf.name.clone(),
            forward_flow: fwd,
            backward_flow: bwd,
            residual: crate::residual(fwd, bwd),
            pass: ok,
        });
    }
    Ok(out)
}

/// A labeled decomposition `{q_u}` of a parent rate function together with a
/// permutation on the labels. The parts need not cover the parent
/// (`sum_u q_u <= q` entrywise); uncovered rate stays unlabeled.
pub struct SubTransitionFamily {
    parent: RateMatrix,
    parts: BTreeMap<Label, RateMatrix>,
    gamma: BTreeMap<Label, Label>,
}

#[derive(Clone, Debug)]
pub struct FamilyVerdict {
    pub pass: bool,
    /// Worst entry where the parts exceed the parent: (i, j, sum, parent).
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl SubTransitionFamily {
    /// `gamma` maps each label to its time-reversal partner and must be a
    /// bijection on the part labels.
    pub fn new(
        parent: RateMatrix,
        parts: BTreeMap<Label, RateMatrix>,
        gamma: BTreeMap<Label, Label>,
    ) -> Result<SubTransitionFamily, BalanceError> {
        let labels: BTreeSet<&Label> = parts.keys().collect();
        if gamma.len() != labels.len() {
            return Err(BalanceError::BadPermutation);
        }
        let mut image = BTreeSet::new();
        for (from, to) in &gamma {
            if !labels.contains(from) || !labels.contains(to) || !image.insert(to) {
                return Err(BalanceError::BadPermutation);
            }
        }
        for part in parts.values() {
            if part.len() != parent.len() {
                return Err(BalanceError::Ctmc(CtmcError::SizeMismatch(
                    part.len(),
                    parent.len(),
                )));
            }
        }
        Ok(SubTransitionFamily { parent, parts, gamma })
    }

    /// Identity permutation convenience for unlabeled reversal work.
    pub fn with_identity_gamma(
        parent: RateMatrix,
        parts: BTreeMap<Label, RateMatrix>,
    ) -> Result<SubTransitionFamily, BalanceError> {
        let gamma = parts.keys().map(|l| (l.clone(), l.clone())).collect();
        SubTransitionFamily::new(parent, parts, gamma)
    }

    pub fn parent(&self) -> &RateMatrix {
        &self.parent
    }

    pub fn labels(&self) -> impl Iterator<Item = &Label> {
        self.parts.keys()
    }

    pub fn parts(&self) -> &BTreeMap<Label, RateMatrix> {
        &self.parts
    }

    pub fn part(&self, label: &Label) -> Result<&RateMatrix, BalanceError> {
        self.parts.get(label).ok_or_else(|| BalanceError::UnknownLabel(label.clone()))
    }

    pub fn gamma(&self, label: &Label) -> &Label {
        &self.gamma[label]
    }

    pub fn gamma_inv(&self, label: &Label) -> &Label {
        self.gamma
            .iter()
            .find(|(_, to)| *to == label)
            .map(|(from, _)| from)
            .expect("gamma is a bijection")
    }

    /// Orbits of the permutation ("irreducible sets" of labels).
    pub fn orbits(&self) -> Vec<Vec<Label>> {
        let mut seen = BTreeSet::new();
        let mut orbits = Vec::new();
        for start in self.parts.keys() {
            if seen.contains(start) {
                continue;
            }
            let mut orbit = Vec::new();
            let mut cur = start.clone();
            loop {
                seen.insert(cur.clone());
                orbit.push(cur.clone());
                cur = self.gamma(&cur).clone();
                if cur == *start {
                    break;
                }
            }
            orbits.push(orbit);
        }
        orbits
    }

    /// Checks the defining inequality `sum_u q_u(x,x') <= q(x,x')`. Slack is
    /// allowed; internal transitions need not be covered by any part.
    pub fn validate(&self, tol: f64) -> FamilyVerdict {
        let n = self.parent.len();
        let mut worst: Option<(usize, usize, f64, f64)> = None;
        for i in 0..n {
            let mut sums: BTreeMap<usize, f64> = BTreeMap::new();
            for part in self.parts.values() {
                for (j, r) in part.row(i) {
                    *sums.entry(j).or_insert(0.0) += r;
                }
            }
            for (j, sum) in sums {
                let parent = self.parent.rate(i, j);
                if sum > parent + tol * sum.max(parent).max(1.0) {
                    let excess = sum - parent;
                    if worst.map_or(true, |(_, _, s, p)| excess > s - p) {
                        worst = Some((i, j, sum, parent));
                    }
                }
            }
        }
        FamilyVerdict { pass: worst.is_none(), worst }
    }

    /// Total unlabeled rate out of each state (parent minus all parts),
    /// clamped at zero.
    pub fn residual_rates(&self) -> Vec<f64> {
        let n = self.parent.len();
        let mut out = vec![0.0; n];
        for i in 0..n {
            let total: f64 = self.parent.row(i).map(|(_, r)| r).sum();
            let labeled: f64 = self.parts.values().map(|p| p.row_sum(i)).sum();
            out[i] = (total - labeled).max(0.0);
        }
        out
    }
}

/// Reverses every part of the family and relabels by the permutation:
/// `q~_u(x,x') = pi(x')/pi(x) q_{gamma^-1(u)}(x',x)`.
pub fn gamma_reverse(
    fam: &SubTransitionFamily,
    pi: &Measure,
) -> Result<BTreeMap<Label, RateMatrix>, CtmcError> {
    let mut out = BTreeMap::new();
    for label in fam.labels() {
        let source = fam.gamma_inv(label);
        let part = fam.parts().get(source).expect("label exists");
        out.insert(label.clone(), reverse(part, pi)?);
    }
    Ok(out)
}

/// A named membership test for a class of (rate function, measure) pairs.
///
/// The optional mask restricts which states participate; builders of
/// truncated models exclude boundary states whose balance identities are
/// corrupted by the truncation.
pub struct MembershipPredicate {
    pub name: String,
    #[allow(clippy::type_complexity)]
    test: Box<dyn Fn(&RateMatrix, &Measure, f64, Option<&[bool]>) -> bool + Send + Sync>,
}

impl MembershipPredicate {
    pub fn new(
        name: impl Into<String>,
        test: impl Fn(&RateMatrix, &Measure, f64, Option<&[bool]>) -> bool + Send + Sync + 'static,
    ) -> MembershipPredicate {
        MembershipPredicate { name: name.into(), test: Box::new(test) }
    }

    pub fn eval(&self, g: &RateMatrix, sigma: &Measure, tol: f64, mask: Option<&[bool]>) -> bool {
        (self.test)(g, sigma, tol, mask)
    }

    /// The arrival class: some `c > 0` with every row sum of `g` equal to
    /// `c`.
    ///
    /// Tested in flow form, `sigma(x) * rowsum(x) = c sigma(x)`: on a
    /// truncated model the measure near the cut deviates relatively by an
    /// amount that bare rates would amplify, while the flows it carries
    /// are negligible. For exact models with positive `sigma` this is the
    /// same condition as the bare rate test.
    pub fn constant_exit() -> MembershipPredicate {
        MembershipPredicate::new("constant-exit", |g, sigma, tol, mask| {
            let mut num = 0.0;
            let mut den = 0.0;
            for x in 0..g.len() {
                if !included(mask, x) {
                    continue;
                }
                let w = sigma.weight(x);
                num += w * w * g.row_sum(x);
                den += w * w;
            }
            if den == 0.0 || num <= 0.0 {
                return false;
            }
            let c = num / den;
            (0..g.len()).all(|x| {
                if !included(mask, x) {
                    return true;
                }
                let w = sigma.weight(x);
                close(w * g.row_sum(x), w * c, tol)
            })
        })
    }

    /// The departure class: some `c > 0` with
    /// `sum_x' sigma(x') g(x',x) = c sigma(x)`.
    pub fn reversed_constant_exit() -> MembershipPredicate {
        MembershipPredicate::new("reversed-constant-exit", |g, sigma, tol, mask| {
            matches!(poisson_backward(g, sigma, tol, mask), Ok(Some(_)))
        })
    }
}

fn included(mask: Option<&[bool]>, i: usize) -> bool {
    mask.map_or(true, |m| m[i])
}

/// Rate of the Poisson process counted by `q_star` looking forward: the
/// common row sum if all (unmasked) row sums agree, else `None`.
pub fn poisson_forward(q_star: &RateMatrix, tol: f64, mask: Option<&[bool]>) -> Option<f64> {
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    let mut any = false;
    for i in 0..q_star.len() {
        if !included(mask, i) {
            continue;
        }
        let s = q_star.row_sum(i);
        lo = lo.min(s);
        hi = hi.max(s);
        any = true;
    }
    if !any || lo <= 0.0 {
        return None;
    }
    // scale-free constant detection
    if hi / lo <= 1.0 + tol.max(f64::EPSILON) || (hi - lo) <= tol * hi.max(1.0) {
        Some(0.5 * (lo + hi))
    } else {
        None
    }
}

/// Least-squares fit of the scalar `lambda` in
/// `sum_x' pi(x') q_star(x',x) = lambda pi(x)` over the unmasked states,
/// without checking the residual. `None` when the fit is degenerate or
/// nonpositive.
pub fn backward_rate_fit(
    q_star: &RateMatrix,
    pi: &Measure,
    mask: Option<&[bool]>,
) -> Result<Option<f64>, BalanceError> {
    let n = q_star.len();
    if pi.len() != n {
        return Err(BalanceError::Ctmc(CtmcError::SizeMismatch(pi.len(), n)));
    }
    let inflow = backward_inflow(q_star, pi);
    let mut num = 0.0;
    let mut den = 0.0;
    for x in 0..n {
        if !included(mask, x) {
            continue;
        }
        if pi.weight(x) == 0.0 {
            if inflow[x] > 0.0 {
                return Err(BalanceError::ZeroWeightState(x, inflow[x]));
            }
            continue;
        }
        num += inflow[x] * pi.weight(x);
        den += pi.weight(x) * pi.weight(x);
    }
    if den == 0.0 || num <= 0.0 {
        return Ok(None);
    }
    Ok(Some(num / den))
}

fn backward_inflow(q_star: &RateMatrix, pi: &Measure) -> Vec<f64> {
    let mut inflow = vec![0.0f64; q_star.len()];
    for (x2, x, r) in q_star.entries() {
        inflow[x] += pi.weight(x2) * r;
    }
    inflow
}

/// Rate of the Poisson process counted by `q_star` looking backward: the
/// `lambda` with `sum_x' pi(x') q_star(x',x) = lambda pi(x)` if one exists.
///
/// `lambda` is extracted by a least-squares fit over the unmasked states and
/// then verified against every state; no single state is privileged.
pub fn poisson_backward(
    q_star: &RateMatrix,
    pi: &Measure,
    tol: f64,
    mask: Option<&[bool]>,
) -> Result<Option<f64>, BalanceError> {
    let lambda = match backward_rate_fit(q_star, pi, mask)? {
        Some(l) => l,
        None => return Ok(None),
    };
    let inflow = backward_inflow(q_star, pi);
    for x in 0..q_star.len() {
        if !included(mask, x) || pi.weight(x) == 0.0 {
            continue;
        }
        if !close(inflow[x], lambda * pi.weight(x), tol) {
            return Ok(None);
        }
    }
    Ok(Some(lambda))
}

/// Per-type quasi-reversibility: returns `beta_u` for every departure part
/// if the backward Poisson criterion holds for each of them, else `None`.
pub fn quasi_reversible<'a>(
    departures: impl IntoIterator<Item = (&'a Label, &'a RateMatrix)>,
    pi: &Measure,
    tol: f64,
    mask: Option<&[bool]>,
) -> Result<Option<BTreeMap<Label, f64>>, BalanceError> {
    let mut betas = BTreeMap::new();
    for (label, part) in departures {
        match poisson_backward(part, pi, tol, mask)? {
            Some(beta) => {
                betas.insert(label.clone(), beta);
            }
            None => return Ok(None),
        }
    }
    Ok(Some(betas))
}

#[derive(Clone, Debug)]
pub struct LabelVerdict {
    pub label: Label,
    /// Membership of the forward part, `None` when no predicate was given.
    pub forward_member: Option<bool>,
    /// Membership of the reversed-and-relabeled part.
    pub reversed_member: Option<bool>,
    /// `forward => reversed`; vacuously true without a predicate or when
    /// the forward part is not a member.
    pub implication_ok: bool,
}

#[derive(Clone, Debug)]
pub struct GammaReport {
    pub pass: bool,
    pub labels: Vec<LabelVerdict>,
    pub orbits: Vec<Vec<Label>>,
}

/// Checks Gamma-reversibility in structure of a family against per-label
/// class predicates: for every label `u` whose part is in its class, the
/// reversed part `q~_u` must be in the same class.
pub fn check_gamma_reversibility(
    fam: &SubTransitionFamily,
    pi: &Measure,
    preds: &BTreeMap<Label, MembershipPredicate>,
    tol: f64,
    mask: Option<&[bool]>,
) -> Result<GammaReport, BalanceError> {
    let reversed = gamma_reverse(fam, pi)?;
    let mut labels = Vec::new();
    let mut pass = true;
    for label in fam.labels() {
        let verdict = match preds.get(label) {
            None => LabelVerdict {
                label: label.clone(),
                forward_member: None,
                reversed_member: None,
                implication_ok: true,
            },
            Some(pred) => {
                let fwd = pred.eval(fam.part(label)?, pi, tol, mask);
                let rev = pred.eval(&reversed[label], pi, tol, mask);
                let ok = !fwd || rev;
                pass &= ok;
                LabelVerdict {
                    label: label.clone(),
                    forward_member: Some(fwd),
                    reversed_member: Some(rev),
                    implication_ok: ok,
                }
            }
        };
        labels.push(verdict);
    }
    Ok(GammaReport { pass, labels, orbits: fam.orbits() })
}
