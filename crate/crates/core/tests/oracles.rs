mod common;

use common::*;
use farma_core::qp::{solve_qp_with, QpProblem, QpSettings, WarmStart};
use farma_core::trainer::{build_training_matrices, train_arma};
use nalgebra::{DMatrix, DVector};

#[test]
fn qp_matches_enumeration() {
    let out = run_qp_oracle(7, 200);
    assert_eq!(out.non_optimal, 0);
    assert!(out.worst_objective_gap <= 1e-6, "objective gap {}", out.worst_objective_gap);
    assert!(out.worst_kkt <= 1e-6, "kkt {}", out.worst_kkt);
}

#[test]
fn enumeration_oracle_on_a_known_qp() {
    // min ½‖u‖² - u₁ - u₂  s.t.  u₁ + u₂ ≤ 1: optimum (½, ½).
    let p = QpProblem::new(
        DMatrix::identity(2, 2),
        DVector::from_column_slice(&[-1.0, -1.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, 1.0]),
        DVector::from_element(1, 1.0),
    )
    .unwrap();
    let u = brute_force_qp(&p).unwrap();
    assert!((u - DVector::from_column_slice(&[0.5, 0.5])).amax() < 1e-12);
}

#[test]
fn warm_started_qp_agrees_with_cold() {
    let mut r = rng(11);
    for _ in 0..50 {
        let p = random_qp(&mut r, 6, 12);
        let cold = solve_qp_with(&p, &QpSettings::default(), None);
        let warm = solve_qp_with(&p, &QpSettings::default(), Some(&WarmStart::from_solution(&cold)));
        assert!(warm.is_optimal());
        assert!((warm.u_star - &cold.u_star).amax() < 1e-8);
        assert!(warm.iterations <= 1, "warm start took {} iterations", warm.iterations);
    }
}

#[test]
fn sqp_reduces_to_linear_mpc_on_lq_problems() {
    let worst = run_lq_equivalence(3, 20);
    assert!(worst <= 1e-4, "max |Δu| = {worst}");
}

#[test]
fn trainer_recovers_known_coefficients() {
    let syn = synthetic_arma(5, 3, 500);
    let mats = build_training_matrices(&syn.data, &DMatrix::zeros(6, 6)).unwrap();
    assert_eq!(mats.phi.nrows(), 497);
    let theta = train_arma(&mats, None).unwrap();
    assert!((theta - &syn.theta).amax() <= 1e-6);
}

#[test]
fn constrained_trainer_respects_limits() {
    let syn = synthetic_arma(6, 3, 500);
    let mats = build_training_matrices(&syn.data, &DMatrix::zeros(6, 6)).unwrap();
    let bound = 0.6 * mats.u.amax();
    let theta = train_arma(&mats, Some(&limits(bound))).unwrap();
    let pred = &mats.phi * &theta;
    assert!(pred.amax() <= bound + 1e-6, "prediction {} exceeds {bound}", pred.amax());
    // Loose limits leave the exact fit untouched.
    let loose = train_arma(&mats, Some(&limits(10.0 * mats.u.amax()))).unwrap();
    assert!((loose - &syn.theta).amax() <= 1e-6);
}
