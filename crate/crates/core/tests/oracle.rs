//! Cross-checks of the production solver against the independent dense
//! elimination oracle in `common`.

mod common;

use common::{dense_stationary_oracle, random_irreducible_chain, TestRng};
use qrev::ctmc::{
    stationary_distribution, stationary_residual, Measure, RateMatrix, SolveMethod,
    SolverOptions, StateSpace,
};

#[test]
fn six_state_chain_matches_oracle() {
    let space = StateSpace::enumerate_box(&[5]);
    let mut q = RateMatrix::zeros(space);
    let mut rng = TestRng::new(99);
    for i in 0..6usize {
        q.add(i, (i + 1) % 6, rng.uniform(0.2, 2.0));
        q.add((i + 1) % 6, i, rng.uniform(0.2, 2.0));
    }
    q.add(0, 3, 0.7);
    q.add(4, 1, 1.3);
    let pi = stationary_distribution(&q, &SolverOptions::default()).unwrap();
    let oracle = dense_stationary_oracle(&q);
    for i in 0..6 {
        assert!((pi.weight(i) - oracle[i]).abs() < 1e-12, "state {i}");
    }
}

#[test]
fn oracle_agreement_over_many_random_chains() {
    for seed in 0..60u64 {
        let q = random_irreducible_chain(seed + 500, 25);
        let pi = stationary_distribution(&q, &SolverOptions::default()).unwrap();
        let oracle = dense_stationary_oracle(&q);
        for i in 0..q.len() {
            assert!(
                (pi.weight(i) - oracle[i]).abs() < 1e-12,
                "seed {seed}, state {i}: {} vs {}",
                pi.weight(i),
                oracle[i]
            );
        }
    }
}

#[test]
fn power_iteration_agrees_with_direct_path() {
    let q = random_irreducible_chain(7, 20);
    let direct = stationary_distribution(&q, &SolverOptions::default()).unwrap();
    let opts = SolverOptions {
        method: SolveMethod::Power,
        iter_tol: 1e-14,
        tol: 1e-8,
        ..Default::default()
    };
    let power = stationary_distribution(&q, &opts).unwrap();
    for i in 0..q.len() {
        assert!((direct.weight(i) - power.weight(i)).abs() < 1e-8);
    }
}

#[test]
fn solver_residual_is_reported_accurately() {
    let q = random_irreducible_chain(11, 15);
    let pi = stationary_distribution(&q, &SolverOptions::default()).unwrap();
    let res = stationary_residual(&q, &pi);
    assert!(res < 1e-13, "residual {res}");
    // a deliberately wrong measure has a visible residual
    let uniform = Measure::uniform(q.space().clone()).normalize().unwrap();
    assert!(stationary_residual(&q, &uniform) > 1e-3);
}
