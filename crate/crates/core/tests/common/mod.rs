//! Oracles and fixtures shared by the integration tests and the acceptance run.
#![allow(dead_code)]

pub mod props;

use std::sync::Arc;

use farma_core::arma::PerformanceMap;
use farma_core::experiments::ScenarioConfig;
use farma_core::linear_mpc::{lmpc_step, LinearMpcConfig};
use farma_core::nmpc::{cold_start, sqp_solve, LinearDynamics, NmpcConfig, QuadraticCost, SqpSettings};
use farma_core::plant::SaturationLimits;
use farma_core::qp::{solve_qp_with, QpProblem, QpSettings, QpSolution};
use farma_core::trainer::TrainingDataset;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize, s: f64) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random_range(-s..s))
}

fn uniform_vector(rng: &mut ChaCha8Rng, n: usize, s: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-s..s))
}

/// Strictly convex QP with `n` variables and `m` rows, feasible by construction.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, m: usize) -> QpProblem {
    let l = uniform_matrix(rng, n, n, 1.0);
    let h = l.tr_mul(&l) + DMatrix::identity(n, n) * 0.1;
    let q = uniform_vector(rng, n, 5.0);
    let gamma = uniform_matrix(rng, m, n, 1.0);
    let inside = uniform_vector(rng, n, 1.0);
    let slack = DVector::from_fn(m, |_, _| rng.random_range(0.0..1.0));
    let nu = &gamma * inside + slack;
    QpProblem::new(h, q, gamma, nu).expect("well-formed QP")
}

/// Optimum by enumerating working sets in order of size. The first set whose
/// equality-constrained solution is feasible with nonnegative multipliers is
/// a KKT point, which is the unique minimizer for positive definite `H`.
pub fn brute_force_qp(p: &QpProblem) -> Option<DVector<f64>> {
    let (n, m) = (p.h().nrows(), p.gamma().nrows());
    for size in 0..=n.min(m) {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            if let Some(u) = kkt_point(p, &idx) {
                return Some(u);
            }
            if !next_combination(&mut idx, m) {
                break;
            }
        }
    }
    None
}

/// Advances `idx` to the next `idx.len()`-subset of `0..m` in lexicographic order.
fn next_combination(idx: &mut [usize], m: usize) -> bool {
    let s = idx.len();
    for i in (0..s).rev() {
        if idx[i] < m - s + i {
            idx[i] += 1;
            for j in i + 1..s {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn kkt_point(p: &QpProblem, set: &[usize]) -> Option<DVector<f64>> {
    let n = p.h().nrows();
    let s = set.len();
    let g = DMatrix::from_fn(s, n, |i, j| p.gamma()[(set[i], j)]);
    let mut k = DMatrix::zeros(n + s, n + s);
    k.view_mut((0, 0), (n, n)).copy_from(p.h());
    k.view_mut((0, n), (n, s)).copy_from(&g.transpose());
    k.view_mut((n, 0), (s, n)).copy_from(&g);
    let mut rhs = DVector::zeros(n + s);
    rhs.rows_mut(0, n).copy_from(&(-p.q()));
    for (i, &c) in set.iter().enumerate() {
        rhs[n + i] = p.nu()[c];
    }
    let sol = k.lu().solve(&rhs)?;
    let u = sol.rows(0, n).into_owned();
    let feasible = p.max_violation(&u) <= 1e-9;
    let dual = sol.rows(n, s).iter().all(|l| *l >= -1e-9);
    (feasible && dual).then_some(u)
}

pub struct QpOracleOutcome {
    pub worst_objective_gap: f64,
    pub worst_kkt: f64,
    pub non_optimal: usize,
}

/// Solves `count` random QPs and compares against [`brute_force_qp`].
pub fn run_qp_oracle(seed: u64, count: usize) -> QpOracleOutcome {
    let mut r = rng(seed);
    let mut out = QpOracleOutcome {
        worst_objective_gap: 0.0,
        worst_kkt: 0.0,
        non_optimal: 0,
    };
    for _ in 0..count {
        let n = r.random_range(1..=10);
        let m = r.random_range(0..=20);
        let p = random_qp(&mut r, n, m);
        let sol: QpSolution = solve_qp_with(&p, &QpSettings::default(), None);
        let exact = brute_force_qp(&p).expect("feasible strictly convex QP has a KKT point");
        let gap = (p.objective(&sol.u_star) - p.objective(&exact)).abs();
        out.worst_objective_gap = out.worst_objective_gap.max(gap);
        out.worst_kkt = out.worst_kkt.max(p.kkt_residual(&sol.u_star, &sol.lambda));
        out.non_optimal += usize::from(!sol.is_optimal());
    }
    out
}

/// The double-integrator MPC as a linear MPC and as the same problem posed to
/// the SQP solver with linear dynamics and quadratic costs.
pub fn lq_pair() -> (LinearMpcConfig, NmpcConfig) {
    let lin = ScenarioConfig::example1().linear_mpc().expect("default config");
    let nl = NmpcConfig::new(
        Arc::new(LinearDynamics::new(lin.a().clone(), lin.b().clone()).unwrap()),
        lin.horizon(),
        Arc::new(QuadraticCost::new(lin.q_bar().clone()).unwrap()),
        Arc::new(QuadraticCost::new(lin.q_bar_f().clone()).unwrap()),
        Arc::new(QuadraticCost::new(lin.r_bar().clone()).unwrap()),
        lin.limits().clone(),
        SqpSettings::default(),
    )
    .unwrap();
    (lin, nl)
}

/// Largest `|u_SQP - u_MPC|` over `count` random states.
pub fn run_lq_equivalence(seed: u64, count: usize) -> f64 {
    let (lin, nl) = lq_pair();
    let x_ref = DVector::from_column_slice(&[2.0, 0.0]);
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let x = DVector::from_column_slice(&[r.random_range(-3.0..3.0), r.random_range(-3.0..3.0)]);
        let u_mpc = lmpc_step(&lin, &x, &x_ref, None).unwrap().u;
        let warm = cold_start(&nl, &x).unwrap();
        let sol = sqp_solve(&nl, &x, &x_ref, &warm).unwrap();
        worst = worst.max((sol.input(0, 1) - u_mpc).amax());
    }
    worst
}

/// Synthetic ARMA data: `z` is white noise in `[-1, 1]`, `u_k = φ_k θ*`.
pub struct SyntheticArma {
    pub data: TrainingDataset,
    pub theta: DVector<f64>,
}

pub fn synthetic_arma(seed: u64, window: usize, samples: usize) -> SyntheticArma {
    let mut r = rng(seed);
    let d: Vec<f64> = (0..window).map(|j| 0.4 * (-0.6f64).powi(j as i32 + 1)).collect();
    let n: Vec<f64> = (0..window).map(|j| 1.5 / (j as f64 + 1.0) * if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let z: Vec<f64> = (0..samples).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut u: Vec<f64> = (0..window).map(|_| r.random_range(-1.0..1.0)).collect();
    for k in window..samples {
        let mut v = 0.0;
        for j in 1..=window {
            v += d[j - 1] * u[k - j] + n[j - 1] * z[k - j];
        }
        u.push(v);
    }
    // Tracking error with r = 0 gives z = -y.
    let data = TrainingDataset {
        u: u.iter().map(|v| DVector::from_element(1, *v)).collect(),
        y: z.iter().map(|v| DVector::from_element(1, -v)).collect(),
        r: vec![DVector::zeros(1); samples],
        map: PerformanceMap::TrackingError,
        window,
    };
    let theta = DVector::from_iterator(2 * window, d.into_iter().chain(n));
    SyntheticArma { data, theta }
}

pub fn limits(bound: f64) -> SaturationLimits {
    SaturationLimits::symmetric(1, bound).unwrap()
}
