//! Property tests for the reversal algebra and solver invariants.

mod common;

use proptest::prelude::*;

use common::dense_stationary_oracle;
use qrev::ctmc::{stationary_distribution, Measure, RateMatrix, SolverOptions, StateSpace};
use qrev::models::{reversed_routing, routing_invariant};
use qrev::reversal::reverse;

fn arb_chain() -> impl Strategy<Value = RateMatrix> {
    (2usize..12, any::<u64>()).prop_map(|(n, seed)| {
        let mut rng = common::TestRng::new(seed);
        let space = StateSpace::enumerate_box(&[(n - 1) as u32]);
        let mut q = RateMatrix::zeros(space);
        for i in 0..n {
            q.add(i, (i + 1) % n, rng.uniform(0.1, 3.0));
        }
        for _ in 0..2 * n {
            let i = rng.below(n as u64) as usize;
            let j = rng.below(n as u64) as usize;
            if i != j {
                q.add(i, j, rng.uniform(0.1, 3.0));
            }
        }
        q
    })
}

fn arb_positive_measure(n: usize) -> impl Strategy<Value = Vec<f64>> {
    proptest::collection::vec(0.05f64..10.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // reversal is an involution for strictly positive reference measures
    #[test]
    fn reverse_is_involution(q in arb_chain(), seed in any::<u64>()) {
        let mut rng = common::TestRng::new(seed);
        let w: Vec<f64> = (0..q.len()).map(|_| rng.uniform(0.05, 10.0)).collect();
        let pi = Measure::new(q.space().clone(), w).unwrap();
        let back = reverse(&reverse(&q, &pi).unwrap(), &pi).unwrap();
        prop_assert!(back.max_rel_diff(&q) < 1e-14);
    }

    // reversal preserves total flow: sum_x pi(x) a(x) is invariant
    #[test]
    fn reverse_preserves_total_flow(q in arb_chain(), seed in any::<u64>()) {
        let mut rng = common::TestRng::new(seed);
        let w: Vec<f64> = (0..q.len()).map(|_| rng.uniform(0.05, 10.0)).collect();
        let pi = Measure::new(q.space().clone(), w).unwrap();
        let rev = reverse(&q, &pi).unwrap();
        let flow = |m: &RateMatrix| -> f64 {
            m.entries().map(|(i, _, r)| pi.weight(i) * r).sum()
        };
        prop_assert!((flow(&q) - flow(&rev)).abs() <= 1e-9 * flow(&q).max(1.0));
    }

    // the production solver agrees with the independent dense oracle
    #[test]
    fn solver_matches_dense_oracle(q in arb_chain()) {
        let pi = stationary_distribution(&q, &SolverOptions::default()).unwrap();
        let oracle = dense_stationary_oracle(&q);
        for i in 0..q.len() {
            prop_assert!((pi.weight(i) - oracle[i]).abs() < 1e-12);
        }
    }

    // self-loops never change the stationary distribution
    #[test]
    fn self_loops_are_invisible(q in arb_chain(), seed in any::<u64>()) {
        let base = stationary_distribution(&q, &SolverOptions::default()).unwrap();
        let mut rng = common::TestRng::new(seed);
        let mut looped = q.clone();
        for i in 0..q.len() {
            looped.add(i, i, rng.uniform(0.0, 4.0));
        }
        let pi = stationary_distribution(&looped, &SolverOptions::default()).unwrap();
        for i in 0..q.len() {
            prop_assert!((pi.weight(i) - base.weight(i)).abs() < 1e-13);
        }
    }

    // reversed routing of an invariant measure stays row-stochastic and
    // keeps the measure invariant
    #[test]
    fn reversed_routing_is_stochastic(n in 2usize..7, seed in any::<u64>()) {
        let mut rng = common::TestRng::new(seed);
        let mut r = vec![vec![0.0f64; n]; n];
        for row in r.iter_mut() {
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = rng.uniform(0.01, 1.0);
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let inv = routing_invariant(&r, 1e-9).unwrap();
        prop_assert!(inv.irreducible);
        let rr = reversed_routing(&r, &inv.nu).unwrap();
        for row in &rr {
            let s: f64 = row.iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }
        // invariance of nu under the reversed routing
        for u in 0..n {
            let inflow: f64 = (0..n).map(|v| inv.nu[v] * rr[v][u]).sum();
            prop_assert!((inflow - inv.nu[u]).abs() < 1e-10);
        }
    }

    // a measure with zero entries reverses to zero rows, and the triple
    // reversal collapses onto the single one
    #[test]
    fn zero_support_rows_vanish(q in arb_chain(), seed in any::<u64>()) {
        let mut rng = common::TestRng::new(seed);
        let w: Vec<f64> = (0..q.len())
            .map(|i| if i % 3 == 0 { 0.0 } else { rng.uniform(0.1, 2.0) })
            .collect();
        let pi = Measure::new(q.space().clone(), w).unwrap();
        let r1 = reverse(&q, &pi).unwrap();
        for i in (0..q.len()).step_by(3) {
            prop_assert_eq!(r1.row(i).count(), 0);
        }
        let r3 = reverse(&reverse(&r1, &pi).unwrap(), &pi).unwrap();
        prop_assert!(r3.max_abs_diff(&r1) < 1e-13);
    }
}
