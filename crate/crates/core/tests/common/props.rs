//! Property checks as (strategy, check) pairs, so the same code runs under
//! `proptest!` and under a hand-driven `TestRunner`.

use std::f64::consts::PI;

use farma_core::arma::build_regressor;
use farma_core::experiments::ScenarioConfig;
use farma_core::fuzzy::{blend, rule_weights};
use farma_core::plant::{cart_pendulum_model, rk4_step, wrap_pi, CartPendulumParams, PlantModel, SaturationLimits};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use proptest::test_runner::TestCaseError;

type Check = Result<(), TestCaseError>;

pub fn saturation_strategy() -> impl Strategy<Value = Vec<(f64, f64, f64)>> {
    prop::collection::vec((-50.0..50.0f64, -20.0..20.0f64, 0.0..20.0f64), 1..5)
}

/// `σ(σ(u)) = σ(u)`, `σ(u)` inside the box, and `σ` is the identity inside.
pub fn check_saturation(channels: Vec<(f64, f64, f64)>) -> Check {
    let u = DVector::from_iterator(channels.len(), channels.iter().map(|c| c.0));
    let lo = DVector::from_iterator(channels.len(), channels.iter().map(|c| c.1));
    let hi = DVector::from_iterator(channels.len(), channels.iter().map(|c| c.1 + c.2));
    let lim = SaturationLimits::new(lo, hi).unwrap();
    let s = lim.saturate(&u);
    prop_assert_eq!(lim.saturate(&s), s.clone());
    prop_assert!(lim.contains(&s, 0.0));
    if lim.contains(&u, 0.0) {
        prop_assert_eq!(s, u);
    }
    Ok(())
}

pub fn wrap_strategy() -> impl Strategy<Value = (f64, i32)> {
    (-100.0..100.0f64, -20..20i32)
}

pub fn check_wrap((a, k): (f64, i32)) -> Check {
    let w = wrap_pi(a);
    prop_assert!((-PI..=PI).contains(&w));
    prop_assert!((w.sin() - a.sin()).abs() < 1e-9 && (w.cos() - a.cos()).abs() < 1e-9);
    let d = (wrap_pi(a + 2.0 * PI * f64::from(k)) - w).abs();
    // Equal, or the two representatives of ±π.
    prop_assert!(d < 1e-9 || (d - 2.0 * PI).abs() < 1e-9, "wrap({a} + 2π·{k}) differs by {d}");
    Ok(())
}

/// Four integrators in series: `x⃛⃛₁ = u`.
struct Chain4;

impl PlantModel for Chain4 {
    fn state_dim(&self) -> usize {
        4
    }
    fn input_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        DVector::from_column_slice(&[x[1], x[2], x[3], u[0]])
    }
    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, x[0])
    }
    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        unimplemented!("not needed for integration checks")
    }
}

pub fn rk4_strategy() -> impl Strategy<Value = ([f64; 4], f64, f64)> {
    (prop::array::uniform4(-5.0..5.0f64), -5.0..5.0f64, 0.001..1.0f64)
}

/// The chain's exact flow is a degree-4 polynomial in `t`, which RK4
/// reproduces to rounding.
pub fn check_rk4((x0, u, dt): ([f64; 4], f64, f64)) -> Check {
    let x = DVector::from_column_slice(&x0);
    let got = rk4_step(&Chain4, &x, &DVector::from_element(1, u), dt);
    let mut coeffs = x0.to_vec();
    coeffs.push(u);
    let fact = [1.0, 1.0, 2.0, 6.0, 24.0];
    for i in 0..4 {
        let exact: f64 = (i..5).map(|j| coeffs[j] * dt.powi((j - i) as i32) / fact[j - i]).sum();
        prop_assert!((got[i] - exact).abs() <= 1e-12 * (1.0 + exact.abs()), "x{i}: {} vs {exact}", got[i]);
    }
    Ok(())
}

pub fn gamma_strategy() -> impl Strategy<Value = f64> {
    0.0..10.0f64
}

/// Both example rule bases cover every `γ ≥ 0` with weights summing to one.
pub fn check_partition_of_unity(gamma: f64) -> Check {
    for cfg in [ScenarioConfig::example1(), ScenarioConfig::example2()] {
        let w = rule_weights(&cfg.fuzzy_rules().unwrap(), &DVector::from_element(1, gamma));
        prop_assert!(w.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!((w.sum() - 1.0).abs() < 1e-12, "{}: Σμ = {} at γ = {gamma}", cfg.name, w.sum());
    }
    Ok(())
}

pub fn blend_strategy() -> impl Strategy<Value = Vec<(f64, [f64; 2])>> {
    prop::collection::vec(
        (prop_oneof![Just(0.0), 0.0..1.0f64], prop::array::uniform2(-30.0..30.0f64)),
        1..6,
    )
}

/// The blend lies in the componentwise hull of the member outputs.
pub fn check_blend_convexity(members: Vec<(f64, [f64; 2])>) -> Check {
    let w = DVector::from_iterator(members.len(), members.iter().map(|m| m.0));
    let outs: Vec<DVector<f64>> = members.iter().map(|m| DVector::from_column_slice(&m.1)).collect();
    let u = blend(&w, &outs);
    for c in 0..2 {
        let lo = outs.iter().map(|o| o[c]).fold(f64::INFINITY, f64::min);
        let hi = outs.iter().map(|o| o[c]).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(u[c] >= lo - 1e-12 && u[c] <= hi + 1e-12, "{} outside [{lo}, {hi}]", u[c]);
    }
    Ok(())
}

pub fn jacobian_strategy() -> impl Strategy<Value = ([f64; 4], f64)> {
    ((-2.0..2.0f64, -3.0..3.0f64, -PI..PI, -8.0..8.0f64).prop_map(|(a, b, c, d)| [a, b, c, d]), -30.0..30.0f64)
}

/// Analytic cart-pendulum Jacobians against central differences.
pub fn check_jacobian((x0, u0): ([f64; 4], f64)) -> Check {
    let model = cart_pendulum_model(CartPendulumParams::default()).unwrap();
    let x = DVector::from_column_slice(&x0);
    let u = DVector::from_element(1, u0);
    let (jx, ju) = model.jacobians(&x, &u);
    let h = 1e-6;
    let close = |a: f64, fd: f64| (a - fd).abs() <= 1e-4 * a.abs().max(1.0);
    for j in 0..4 {
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let fd = (model.derivative(&xp, &u) - model.derivative(&xm, &u)) / (2.0 * h);
        for i in 0..4 {
            prop_assert!(close(jx[(i, j)], fd[i]), "∂f{i}/∂x{j}: {} vs {}", jx[(i, j)], fd[i]);
        }
    }
    let fd = (model.derivative(&x, &DVector::from_element(1, u0 + h)) - model.derivative(&x, &DVector::from_element(1, u0 - h))) / (2.0 * h);
    for i in 0..4 {
        prop_assert!(close(ju[(i, 0)], fd[i]), "∂f{i}/∂u: {} vs {}", ju[(i, 0)], fd[i]);
    }
    Ok(())
}

pub fn regressor_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>, f64)> {
    (1usize..5).prop_flat_map(|w| {
        (
            prop::collection::vec(-10.0..10.0f64, 4 * w),
            prop::collection::vec(-10.0..10.0f64, 6 * w),
            -3.0..3.0f64,
        )
    })
}

/// `φ(θ₁ + aθ₂) = φθ₁ + aφθ₂` with `ℓu = 2`, `ℓz = 1`.
pub fn check_regressor_linearity((hist, thetas, a): (Vec<f64>, Vec<f64>, f64)) -> Check {
    let w = hist.len() / 4;
    let u_hist: Vec<DVector<f64>> = (0..w).map(|j| DVector::from_column_slice(&hist[2 * j..2 * j + 2])).collect();
    let z_hist: Vec<DVector<f64>> = (0..w).map(|j| DVector::from_element(1, hist[2 * w + j])).collect();
    let phi = build_regressor(&u_hist, &z_hist, 2, 1);
    prop_assert_eq!(phi.shape(), (2, 6 * w));
    let t1 = DVector::from_column_slice(&thetas[..6 * w]);
    let t2 = t1.map(|v| v * 0.5 - 1.0);
    let lhs = &phi * (&t1 + &t2 * a);
    let rhs = &phi * &t1 + (&phi * &t2) * a;
    prop_assert!((lhs - rhs).amax() <= 1e-9 * (1.0 + phi.amax() * t1.amax()));
    Ok(())
}
