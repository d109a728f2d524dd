//! Birth-death queues, the batch-service queue, and generic reacting
//! systems fed by Poisson arrivals.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::balance::{Label, SubTransitionFamily};
use crate::ctmc::{RateMatrix, StateSpace};
use crate::models::{Kernel, ModelError, QueueModel};
use crate::reversal::birth_death_measure;

/// A birth-death chain on `{0, .., up.len()}` with `up[x] = q(x, x+1)` and
/// `down[x] = q(x+1, x)`. The closed-form stationary measure comes from the
/// running product of rate ratios, normalized on the box.
pub fn build_birth_death(up: &[f64], down: &[f64]) -> Result<QueueModel, ModelError> {
    let bound = up.len();
    if down.len() != bound {
        return Err(ModelError::InvalidDistribution(format!(
            "up and down must have equal length ({} vs {})",
            up.len(),
            down.len()
        )));
    }
    for (x, &r) in up.iter().enumerate() {
        if !(r > 0.0) {
            return Err(ModelError::NonPositiveRate { name: format!("up[{x}]"), value: r });
        }
    }
    for (x, &r) in down.iter().enumerate() {
        if !(r > 0.0) {
            return Err(ModelError::NonPositiveRate { name: format!("down[{x}]"), value: r });
        }
    }
    let space = StateSpace::enumerate_box(&[bound as u32]);
    let mut q = RateMatrix::zeros(space.clone());
    let mut qa = RateMatrix::zeros(space.clone());
    let mut qd = RateMatrix::zeros(space.clone());
    for x in 0..bound {
        q.add(x, x + 1, up[x]);
        q.add(x + 1, x, down[x]);
        qa.add(x, x + 1, up[x]);
        qd.add(x + 1, x, down[x]);
    }
    // arrivals past the box are dropped truncation mass
    q.drop_rate(bound, up.last().copied().unwrap_or(0.0));
    let closed = birth_death_measure(&q)
        .map_err(|e| ModelError::InvalidDistribution(e.to_string()))?
        .normalize()?;
    let family = SubTransitionFamily::new(
        q,
        BTreeMap::from([(Label::arrival(), qa), (Label::departure(), qd)]),
        BTreeMap::from([
            (Label::arrival(), Label::departure()),
            (Label::departure(), Label::arrival()),
        ]),
    )?;
    let mut boundary = vec![false; space.len()];
    boundary[bound] = true;
    Ok(QueueModel::new(space, family).with_closed_form(closed).with_boundary(boundary))
}

/// M/M/1 queue truncated at `bound`. With `rho = lambda/mu < 1` the closed
/// form is the geometric distribution normalized on the box; otherwise the
/// raw geometric measure is attached unnormalized.
pub fn build_mm1(lambda: f64, mu: f64, bound: u32) -> Result<QueueModel, ModelError> {
    build_mms(lambda, mu, 1, bound)
}

/// M/M/s queue truncated at `bound` (down-rate `min(x, s) * mu`).
pub fn build_mms(lambda: f64, mu: f64, servers: u32, bound: u32) -> Result<QueueModel, ModelError> {
    if !(lambda > 0.0) {
        return Err(ModelError::NonPositiveRate { name: "lambda".into(), value: lambda });
    }
    if !(mu > 0.0) {
        return Err(ModelError::NonPositiveRate { name: "mu".into(), value: mu });
    }
    if servers == 0 {
        return Err(ModelError::NonPositiveRate { name: "s".into(), value: 0.0 });
    }
    let up = vec![lambda; bound as usize];
    let down: Vec<f64> =
        (1..=bound).map(|x| x.min(servers) as f64 * mu).collect();
    let model = build_birth_death(&up, &down)?;
    let rho = lambda / (servers as f64 * mu);
    let mut model = model
        .with_param("lambda", lambda)
        .with_param("mu", mu)
        .with_param("s", servers as f64)
        .with_param("rho", rho);
    if rho >= 1.0 {
        // no normalizable stationary distribution on the infinite space;
        // keep the raw unnormalized measure as documentation of the form
        let q = model.q();
        let raw = birth_death_measure(q).map_err(|e| ModelError::InvalidDistribution(e.to_string()))?;
        model.closed_form_pi = Some(raw);
    }
    Ok(model)
}

/// Which service completions the departure part of a batch-service queue
/// counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DepartureCounting {
    /// Every completion, including short batches that empty the queue.
    All,
    /// Only full batches: completions whose requested size is at most the
    /// queue length at the completion instant (a requested size exactly
    /// equal to the queue length counts as full).
    FullBatches,
}

/// M/M/1 batch-service queue: Poisson arrivals of singletons, service
/// completions at rate `mu` removing `min(K, x)` customers where `K` is
/// drawn from `batch_dist` (probabilities of sizes `1..=B`).
///
/// The departure labeling depends on the counting mode; with
/// [`DepartureCounting::All`] the departure stream is not Poisson, with
/// [`DepartureCounting::FullBatches`] it is.
pub fn build_batch_service(
    lambda: f64,
    mu: f64,
    batch_dist: &[f64],
    counting: DepartureCounting,
    bound: u32,
) -> Result<QueueModel, ModelError> {
    if !(lambda > 0.0) {
        return Err(ModelError::NonPositiveRate { name: "lambda".into(), value: lambda });
    }
    if !(mu > 0.0) {
        return Err(ModelError::NonPositiveRate { name: "mu".into(), value: mu });
    }
    if batch_dist.is_empty() {
        return Err(ModelError::InvalidDistribution("empty batch distribution".into()));
    }
    let total: f64 = batch_dist.iter().sum();
    if batch_dist.iter().any(|&p| p < 0.0) || (total - 1.0).abs() > 1e-9 {
        return Err(ModelError::InvalidDistribution(format!(
            "batch probabilities must be nonnegative and sum to 1 (sum = {total})"
        )));
    }
    let b = batch_dist.len();
    let bound = bound as usize;
    let space = StateSpace::enumerate_box(&[bound as u32]);
    let mut q = RateMatrix::zeros(space.clone());
    let mut qa = RateMatrix::zeros(space.clone());
    let mut qd = RateMatrix::zeros(space.clone());
    for x in 0..=bound {
        if x < bound {
            q.add(x, x + 1, lambda);
            qa.add(x, x + 1, lambda);
        } else {
            q.drop_rate(x, lambda);
        }
        if x == 0 {
            continue;
        }
        for (k1, &p) in batch_dist.iter().enumerate() {
            let k = k1 + 1;
            if p == 0.0 {
                continue;
            }
            let removed = k.min(x);
            let rate = mu * p;
            q.add(x, x - removed, rate);
            let counted = match counting {
                DepartureCounting::All => true,
                DepartureCounting::FullBatches => k <= x,
            };
            if counted {
                qd.add(x, x - removed, rate);
            }
        }
    }
    let family = SubTransitionFamily::new(
        q,
        BTreeMap::from([(Label::arrival(), qa), (Label::departure(), qd)]),
        BTreeMap::from([
            (Label::arrival(), Label::departure()),
            (Label::departure(), Label::arrival()),
        ]),
    )?;
    // departures into x come from x+k, so every state within one batch of
    // the top has truncated inflow
    let boundary: Vec<bool> = (0..=bound).map(|x| x + b > bound).collect();
    let mean_batch: f64 =
        batch_dist.iter().enumerate().map(|(k1, &p)| (k1 + 1) as f64 * p).sum();
    Ok(QueueModel::new(space, family)
        .with_param("lambda", lambda)
        .with_param("mu", mu)
        .with_param("mean_batch", mean_batch)
        .with_boundary(boundary))
}

/// A queueing system with its exogenous arrival process stripped off:
/// departure rates, per-type arrival effect kernels, and internal
/// transitions. Feeding it Poisson arrivals yields a Markov chain.
#[derive(Clone)]
pub struct ReactingSystemSpec {
    pub space: Arc<StateSpace>,
    pub types: Vec<String>,
    /// `p_au(x, x')`: effect of an admitted type-`u` arrival. Every row
    /// must be stochastic; an entry on the diagonal models an arrival that
    /// cannot change the state (a blocked customer).
    pub arrivals: BTreeMap<String, Kernel>,
    /// `q_du(x, x')`: departure rates by type.
    pub departures: BTreeMap<String, RateMatrix>,
    /// `q_I`: internal transitions (unlabeled).
    pub internal: RateMatrix,
}

impl ReactingSystemSpec {
    /// Single-type spec with label `c`.
    pub fn single_type(
        space: Arc<StateSpace>,
        arrivals: Kernel,
        departures: RateMatrix,
    ) -> ReactingSystemSpec {
        let internal = RateMatrix::zeros(space.clone());
        ReactingSystemSpec {
            space,
            types: vec!["c".into()],
            arrivals: BTreeMap::from([("c".into(), arrivals)]),
            departures: BTreeMap::from([("c".into(), departures)]),
            internal,
        }
    }
}

/// Feeds Poisson arrivals with per-type rates `alpha` to a reacting system:
/// `q = sum_u (alpha_u p_au + q_du) + q_I`, with family parts `a:u`, `d:u`
/// and the permutation swapping them per type. Arrival self-loop mass
/// (blocked customers) is kept and counts toward exit rates.
pub fn build_reacting_system(
    spec: &ReactingSystemSpec,
    alpha: &BTreeMap<String, f64>,
) -> Result<QueueModel, ModelError> {
    let n = spec.space.len();
    let mut q = RateMatrix::zeros(spec.space.clone());
    let mut parts = BTreeMap::new();
    let mut gamma = BTreeMap::new();
    for ty in &spec.types {
        let a = *alpha.get(ty).ok_or_else(|| ModelError::NonPositiveRate {
            name: format!("alpha[{ty}]"),
            value: f64::NAN,
        })?;
        if !(a > 0.0) {
            return Err(ModelError::NonPositiveRate { name: format!("alpha[{ty}]"), value: a });
        }
        let kernel = spec.arrivals.get(ty).ok_or_else(|| ModelError::KernelNotStochastic {
            ty: ty.clone(),
            row: 0,
            sum: 0.0,
        })?;
        for x in 0..n {
            let sum = kernel.row_sum(x);
            if (sum - 1.0).abs() > 1e-9 {
                return Err(ModelError::KernelNotStochastic { ty: ty.clone(), row: x, sum });
            }
        }
        let qa = kernel.scaled(a);
        let qd = spec.departures.get(ty).cloned().unwrap_or_else(|| RateMatrix::zeros(spec.space.clone()));
        q.add_matrix(&qa);
        q.add_matrix(&qd);
        let (la, ld) = if spec.types.len() == 1 && ty == "c" {
            (Label::arrival(), Label::departure())
        } else {
            (Label::arrival_of(ty), Label::departure_of(ty))
        };
        gamma.insert(la.clone(), ld.clone());
        gamma.insert(ld.clone(), la.clone());
        parts.insert(la, qa);
        parts.insert(ld, qd);
    }
    q.add_matrix(&spec.internal);
    let family = SubTransitionFamily::new(q, parts, gamma)?;
    let mut model = QueueModel::new(spec.space.clone(), family);
    for (ty, &a) in alpha {
        model.params.insert(format!("alpha:{ty}"), a);
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::balance::{poisson_backward, poisson_forward, quasi_reversible};
    use crate::ctmc::{stationary_distribution, SolverOptions};

    #[test]
    fn mm1_model_matches_geometric() {
        let m = build_mm1(1.0, 2.0, 60).unwrap();
        let pi = m.closed_form_pi.as_ref().unwrap();
        let solved = m.solve(&SolverOptions::default()).unwrap();
        for x in 0..m.space().len() {
            assert!((pi.weight(x) - solved.weight(x)).abs() < 1e-12);
        }
        assert!((m.params["rho"] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn unstable_mm1_keeps_unnormalized_form() {
        let m = build_mm1(2.0, 1.0, 40).unwrap();
        let pi = m.closed_form_pi.as_ref().unwrap();
        assert!(!pi.is_normalized());
        assert!((pi.weight(3) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn mm2_closed_form() {
        let m = build_mms(1.0, 1.0, 2, 30).unwrap();
        let pi = m.closed_form_pi.as_ref().unwrap();
        // proportional to (1, 1, 1/2, 1/4, ...)
        let ratio = pi.weight(1) / pi.weight(0);
        assert!((ratio - 1.0).abs() < 1e-12);
        for x in 2..10 {
            assert!((pi.weight(x) / pi.weight(x - 1) - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_when_up_equals_down() {
        let m = build_birth_death(&[1.5; 8], &[1.5; 8]).unwrap();
        let pi = m.closed_form_pi.as_ref().unwrap();
        for x in 0..=8 {
            assert!((pi.weight(x) - 1.0 / 9.0).abs() < 1e-14);
        }
    }

    #[test]
    fn nonpositive_rates_rejected() {
        assert!(matches!(
            build_birth_death(&[1.0, 0.0], &[1.0, 1.0]),
            Err(ModelError::NonPositiveRate { .. })
        ));
        assert!(matches!(build_mm1(-1.0, 2.0, 5), Err(ModelError::NonPositiveRate { .. })));
    }

    #[test]
    fn unit_batches_reduce_to_mm1() {
        let batch = build_batch_service(1.0, 2.0, &[1.0], DepartureCounting::All, 40).unwrap();
        let mm1 = build_mm1(1.0, 2.0, 40).unwrap();
        assert!(batch.q().max_abs_diff(mm1.q()) < 1e-15);
        let qd_batch = &batch.family().parts()[&Label::departure()];
        let qd_mm1 = &mm1.family().parts()[&Label::departure()];
        assert!(qd_batch.max_abs_diff(qd_mm1) < 1e-15);
    }

    #[test]
    fn batch_counting_modes_discriminate() {
        let bound = 80;
        let dist = [0.5, 0.5];
        let all = build_batch_service(1.0, 1.0, &dist, DepartureCounting::All, bound).unwrap();
        let full =
            build_batch_service(1.0, 1.0, &dist, DepartureCounting::FullBatches, bound).unwrap();
        // same generator, different labeling
        assert!(all.q().max_abs_diff(full.q()) < 1e-15);

        let pi = all.solve(&SolverOptions::default()).unwrap();
        let mask_all = all.interior_mask();
        let mask_full = full.interior_mask();
        let rejected = quasi_reversible(
            all.departure_parts().into_iter().map(|(l, p)| (l, p)),
            &pi,
            1e-8,
            mask_all.as_deref(),
        )
        .unwrap();
        assert!(rejected.is_none(), "all-count must not be quasi-reversible");
        let accepted = quasi_reversible(
            full.departure_parts().into_iter().map(|(l, p)| (l, p)),
            &pi,
            1e-8,
            mask_full.as_deref(),
        )
        .unwrap();
        let betas = accepted.expect("full-batch counting is quasi-reversible");
        let beta = betas[&Label::departure()];
        assert!(beta > 0.0);
        // backward rate of the full-batch stream equals mu E[sigma^K] where
        // sigma solves lambda + mu sigma E[sigma^K] = (lambda + mu) sigma;
        // for this instance sigma = sqrt(3) - 1 exactly
        let sigma = solve_sigma(1.0, 1.0, &dist);
        assert!((sigma - (3.0f64.sqrt() - 1.0)).abs() < 1e-9);
        let expect = 0.5 * (sigma + sigma.powi(2));
        assert!((beta - expect).abs() < 1e-6, "beta={beta}, expect={expect}");
    }

    fn solve_sigma(lambda: f64, mu: f64, dist: &[f64]) -> f64 {
        // bisection on f(s) = lambda + mu s E[s^K] - (lambda + mu) s
        let f = |s: f64| {
            let egf: f64 =
                dist.iter().enumerate().map(|(k1, &p)| p * s.powi(k1 as i32 + 1)).sum();
            lambda + mu * s * egf - (lambda + mu) * s
        };
        let (mut lo, mut hi) = (1e-9, 1.0 - 1e-9);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn invalid_batch_distribution_rejected() {
        assert!(matches!(
            build_batch_service(1.0, 1.0, &[0.4, 0.4], DepartureCounting::All, 10),
            Err(ModelError::InvalidDistribution(_))
        ));
    }

    #[test]
    fn reacting_system_reproduces_mm1() {
        let space = StateSpace::enumerate_box(&[30]);
        let mut arr = Kernel::zeros(space.clone());
        let mut dep = RateMatrix::zeros(space.clone());
        for x in 0..30usize {
            arr.add(x, x + 1, 1.0);
            dep.add(x + 1, x, 2.0);
        }
        arr.add(30, 30, 1.0); // blocked arrival at capacity
        let spec = ReactingSystemSpec::single_type(space, arr, dep);
        let model = build_reacting_system(&spec, &BTreeMap::from([("c".into(), 1.0)])).unwrap();
        let mm1 = build_mm1(1.0, 2.0, 30).unwrap();
        // identical except for the blocking self-loop at capacity
        assert!((model.q().rate(30, 30) - 1.0).abs() < 1e-15);
        for x in 0..30usize {
            assert!((model.q().rate(x, x + 1) - mm1.q().rate(x, x + 1)).abs() < 1e-15);
            assert!((model.q().rate(x + 1, x) - mm1.q().rate(x + 1, x)).abs() < 1e-15);
        }
        // blocked arrivals count in the exit rate
        assert!((model.q().exit_rates()[30] - 3.0).abs() < 1e-15);
    }

    #[test]
    fn typed_arrival_parts_have_their_rates() {
        let space = StateSpace::enumerate_box(&[10]);
        let mut arr = Kernel::zeros(space.clone());
        for x in 0..10usize {
            arr.add(x, x + 1, 1.0);
        }
        arr.add(10, 10, 1.0);
        let mut dep = RateMatrix::zeros(space.clone());
        for x in 1..=10usize {
            dep.add(x, x - 1, 1.0);
        }
        let spec = ReactingSystemSpec {
            space: space.clone(),
            types: vec!["t1".into(), "t2".into()],
            arrivals: BTreeMap::from([("t1".into(), arr.clone()), ("t2".into(), arr)]),
            departures: BTreeMap::from([("t1".into(), dep.clone()), ("t2".into(), dep)]),
            internal: RateMatrix::zeros(space),
        };
        let alpha = BTreeMap::from([("t1".into(), 0.3), ("t2".into(), 0.7)]);
        let model = build_reacting_system(&spec, &alpha).unwrap();
        let fam = model.family();
        assert_eq!(
            poisson_forward(&fam.parts()[&Label::arrival_of("t1")], 1e-10, None),
            Some(0.3)
        );
        assert_eq!(
            poisson_forward(&fam.parts()[&Label::arrival_of("t2")], 1e-10, None),
            Some(0.7)
        );
    }

    #[test]
    fn nonstochastic_kernel_rejected() {
        let space = StateSpace::enumerate_box(&[5]);
        let arr = Kernel::zeros(space.clone()); // all rows empty
        let dep = RateMatrix::zeros(space.clone());
        let spec = ReactingSystemSpec::single_type(space, arr, dep);
        assert!(matches!(
            build_reacting_system(&spec, &BTreeMap::from([("c".into(), 1.0)])),
            Err(ModelError::KernelNotStochastic { .. })
        ));
    }

    #[test]
    fn mm1_departure_inflow_rate_is_lambda() {
        let m = build_mm1(1.0, 2.0, 60).unwrap();
        let pi = m.solve(&SolverOptions::default()).unwrap();
        let mask = m.interior_mask();
        let beta = poisson_backward(
            &m.family().parts()[&Label::departure()],
            &pi,
            1e-10,
            mask.as_deref(),
        )
        .unwrap()
        .unwrap();
        assert!((beta - 1.0).abs() < 1e-12);
    }
}
