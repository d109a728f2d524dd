//! Shared helpers for the integration suites: a deterministic test rng,
//! random chain generators, and an independent dense solver used as an
//! oracle against the production elimination path.

#![allow(dead_code)]

use qrev::ctmc::{RateMatrix, StateSpace};

/// xorshift64* generator; good enough for test-case generation and fully
/// deterministic across platforms.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(seed.wrapping_mul(0x9E3779B97F4A7C15).max(1))
    }

    pub fn next_u64(&mut self) -> u64 {
        let mut x = self.0;
        x ^= x << 13;
        x ^= x >> 7;
        x ^= x << 17;
        self.0 = x;
        x.wrapping_mul(0x2545F4914F6CDD1D)
    }

    pub fn unit(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next_u64() % n
    }
}

/// A random irreducible chain on 2..=max_n states: a Hamiltonian cycle of
/// positive rates plus extra random edges.
pub fn random_irreducible_chain(seed: u64, max_n: usize) -> RateMatrix {
    let mut rng = TestRng::new(seed);
    let n = 2 + rng.below((max_n - 1) as u64) as usize;
    let space = StateSpace::enumerate_box(&[(n - 1) as u32]);
    let mut q = RateMatrix::zeros(space);
    for i in 0..n {
        q.add(i, (i + 1) % n, rng.uniform(0.1, 2.0));
    }
    for _ in 0..2 * n {
        let i = rng.below(n as u64) as usize;
        let j = rng.below(n as u64) as usize;
        if i != j {
            q.add(i, j, rng.uniform(0.1, 2.0));
        }
    }
    q
}

/// Independent stationary-distribution oracle: dense Gaussian elimination
/// with partial pivoting on the global balance equations with the last
/// equation replaced by normalization. Shares no code with the production
/// solver.
pub fn dense_stationary_oracle(q: &RateMatrix) -> Vec<f64> {
    let n = q.len();
    // rows: for j < n-1: sum_i pi(i) q(i,j) - a(j) pi(j) = 0
    // last row: sum_i pi(i) = 1
    let mut m = vec![0.0f64; n * (n + 1)];
    let a = q.exit_rates();
    for (i, j, r) in q.entries() {
        if j < n - 1 {
            m[j * (n + 1) + i] += r;
        }
    }
    for j in 0..n - 1 {
        m[j * (n + 1) + j] -= a[j];
        // self-loops cancel from both sides
        m[j * (n + 1) + j] += q.rate(j, j);
    }
    for i in 0..n {
        m[(n - 1) * (n + 1) + i] = 1.0;
    }
    m[(n - 1) * (n + 1) + n] = 1.0;
    // forward elimination with partial pivoting
    for col in 0..n {
        let mut piv = col;
        for row in col + 1..n {
            if m[row * (n + 1) + col].abs() > m[piv * (n + 1) + col].abs() {
                piv = row;
            }
        }
        if piv != col {
            for k in 0..=n {
                m.swap(col * (n + 1) + k, piv * (n + 1) + k);
            }
        }
        let d = m[col * (n + 1) + col];
        assert!(d.abs() > 0.0, "singular system");
        for row in col + 1..n {
            let f = m[row * (n + 1) + col] / d;
            if f != 0.0 {
                for k in col..=n {
                    m[row * (n + 1) + k] -= f * m[col * (n + 1) + k];
                }
            }
        }
    }
    let mut pi = vec![0.0f64; n];
    for row in (0..n).rev() {
        let mut acc = m[row * (n + 1) + n];
        for k in row + 1..n {
            acc -= m[row * (n + 1) + k] * pi[k];
        }
        pi[row] = acc / m[row * (n + 1) + row];
    }
    pi
}
