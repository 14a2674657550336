//! Continuous-time plants and the sampled-data closed loop.
//!
//! At every sample `k` the loop measures `y_k = h(x(kTs))`, asks the
//! controller for `u_r,k`, saturates it to `u_k = σ(u_r,k)` and holds `u_k`
//! over `[kTs, (k+1)Ts)` while a fixed-step RK4 integrator advances the plant.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use nalgebra::{dvector, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Continuous-time dynamics `ẋ = f_c(x, u)` with output `y = h(x)`.
pub trait PlantModel: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    fn output(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `(∂f_c/∂x, ∂f_c/∂u)` evaluated at `(x, u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
}

/// `ẋ₁ = x₂, ẋ₂ = u, y = x₁`.
#[derive(Debug, Clone, Copy, Default)]
pub struct DoubleIntegrator;

pub fn double_integrator_model() -> DoubleIntegrator {
    DoubleIntegrator
}

impl PlantModel for DoubleIntegrator {
    fn state_dim(&self) -> usize {
        2
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        1
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        dvector![x[1], u[0]]
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        dvector![x[0]]
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (
            DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
            DMatrix::from_column_slice(2, 1, &[0.0, 1.0]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CartPendulumParams {
    /// Cart mass `M` in kg.
    pub cart_mass: f64,
    /// Pendulum mass `m` in kg.
    pub pendulum_mass: f64,
    /// Pendulum length `ℓ` in m.
    pub length: f64,
    pub gravity: f64,
}

impl Default for CartPendulumParams {
    fn default() -> Self {
        Self {
            cart_mass: 1.0,
            pendulum_mass: 0.2,
            length: 0.4,
            gravity: 9.81,
        }
    }
}

impl CartPendulumParams {
    pub fn validate(&self) -> Result<()> {
        let all = [self.cart_mass, self.pendulum_mass, self.length, self.gravity];
        if all.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!(
                "cart-pendulum parameters must be positive: {self:?}"
            )))
        }
    }
}

/// Pendulum on a cart with state `[p, ṗ, φ, φ̇]`, force input and output
/// `[p, φ]`. `φ = 0` is upright.
#[derive(Debug, Clone, Copy)]
pub struct CartPendulum {
    params: CartPendulumParams,
}

pub fn cart_pendulum_model(params: CartPendulumParams) -> Result<CartPendulum> {
    params.validate()?;
    Ok(CartPendulum { params })
}

impl CartPendulum {
    pub fn params(&self) -> &CartPendulumParams {
        &self.params
    }

    /// Numerators of `p̈` and `φ̈` and their common denominator.
    fn terms(&self, phi: f64, omega: f64, force: f64) -> (f64, f64, f64) {
        let CartPendulumParams {
            cart_mass: big_m,
            pendulum_mass: m,
            length: l,
            gravity: g,
        } = self.params;
        let ml = m * l;
        let (s, c) = phi.sin_cos();
        let s2 = (2.0 * phi).sin();
        let den = m * l * l * (m + big_m) / 3.0 - 0.25 * (ml * c).powi(2);
        let num_p = m * m * l.powi(3) * omega * omega * s / 6.0 - ml * ml * g * s2 / 8.0
            + m * l * l * force / 3.0;
        let num_phi = 0.5 * m * g * l * (m + big_m) * s - ml * ml * omega * omega * s2 / 8.0
            - 0.5 * ml * c * force;
        (num_p, num_phi, den)
    }
}

impl PlantModel for CartPendulum {
    fn state_dim(&self) -> usize {
        4
    }

    fn input_dim(&self) -> usize {
        1
    }

    fn output_dim(&self) -> usize {
        2
    }

    fn derivative(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        let (num_p, num_phi, den) = self.terms(x[2], x[3], u[0]);
        dvector![x[1], num_p / den, x[3], num_phi / den]
    }

    fn output(&self, x: &DVector<f64>) -> DVector<f64> {
        dvector![x[0], x[2]]
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let CartPendulumParams {
            cart_mass: big_m,
            pendulum_mass: m,
            length: l,
            gravity: g,
        } = self.params;
        let (phi, omega, force) = (x[2], x[3], u[0]);
        let ml = m * l;
        let (s, c) = phi.sin_cos();
        let (s2, c2) = (2.0 * phi).sin_cos();
        let (num_p, num_phi, den) = self.terms(phi, omega, force);

        let dden = 0.25 * ml * ml * s2;
        let dnum_p_dphi = m * m * l.powi(3) * omega * omega * c / 6.0 - 0.25 * ml * ml * g * c2;
        let dnum_p_domega = m * m * l.powi(3) * omega * s / 3.0;
        let dnum_p_dforce = m * l * l / 3.0;
        let dnum_phi_dphi = 0.5 * m * g * l * (m + big_m) * c - 0.25 * ml * ml * omega * omega * c2
            + 0.5 * ml * s * force;
        let dnum_phi_domega = -0.25 * ml * ml * omega * s2;
        let dnum_phi_dforce = -0.5 * ml * c;

        let quotient = |dn: f64, n: f64| (dn * den - n * dden) / (den * den);
        let mut a = DMatrix::zeros(4, 4);
        a[(0, 1)] = 1.0;
        a[(1, 2)] = quotient(dnum_p_dphi, num_p);
        a[(1, 3)] = dnum_p_domega / den;
        a[(2, 3)] = 1.0;
        a[(3, 2)] = quotient(dnum_phi_dphi, num_phi);
        a[(3, 3)] = dnum_phi_domega / den;
        let b = DMatrix::from_column_slice(4, 1, &[0.0, dnum_p_dforce / den, 0.0, dnum_phi_dforce / den]);
        (a, b)
    }
}

/// Componentwise magnitude limits `u_min ≤ u ≤ u_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaturationLimits {
    u_min: DVector<f64>,
    u_max: DVector<f64>,
}

impl SaturationLimits {
    pub fn new(u_min: DVector<f64>, u_max: DVector<f64>) -> Result<Self> {
        check_dim("saturation limits", u_min.len(), u_max.len())?;
        if u_min.iter().zip(u_max.iter()).any(|(lo, hi)| !(lo < hi)) {
            return Err(Error::InvalidParameter(format!(
                "saturation requires u_min < u_max, got {:?} / {:?}",
                u_min.as_slice(),
                u_max.as_slice()
            )));
        }
        Ok(Self { u_min, u_max })
    }

    /// `-limit ≤ u ≤ limit` on every one of `dim` channels.
    pub fn symmetric(dim: usize, limit: f64) -> Result<Self> {
        Self::new(DVector::from_element(dim, -limit), DVector::from_element(dim, limit))
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            u_min: DVector::from_element(dim, f64::NEG_INFINITY),
            u_max: DVector::from_element(dim, f64::INFINITY),
        }
    }

    pub fn dim(&self) -> usize {
        self.u_min.len()
    }

    pub fn u_min(&self) -> &DVector<f64> {
        &self.u_min
    }

    pub fn u_max(&self) -> &DVector<f64> {
        &self.u_max
    }

    pub fn saturate(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut out = u.clone();
        self.saturate_in_place(out.as_mut_slice());
        out
    }

    pub fn saturate_in_place(&self, u: &mut [f64]) {
        for (i, v) in u.iter_mut().enumerate() {
            // NaN stays NaN
            if *v > self.u_max[i] {
                *v = self.u_max[i];
            } else if *v < self.u_min[i] {
                *v = self.u_min[i];
            }
        }
    }

    pub fn contains(&self, u: &DVector<f64>, tol: f64) -> bool {
        u.iter()
            .enumerate()
            .all(|(i, v)| *v <= self.u_max[i] + tol && *v >= self.u_min[i] - tol)
    }
}

pub fn saturate(u: &DVector<f64>, limits: &SaturationLimits) -> DVector<f64> {
    limits.saturate(u)
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_pi(angle: f64) -> f64 {
    let r = angle.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// One classical Runge-Kutta step with `u` held constant.
pub fn rk4_step<M: PlantModel + ?Sized>(
    model: &M,
    x: &DVector<f64>,
    u: &DVector<f64>,
    dt: f64,
) -> DVector<f64> {
    let k1 = model.derivative(x, u);
    let k2 = model.derivative(&(x + &k1 * (0.5 * dt)), u);
    let k3 = model.derivative(&(x + &k2 * (0.5 * dt)), u);
    let k4 = model.derivative(&(x + &k3 * dt), u);
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0)
}

/// What a controller sees at sample `k`.
#[derive(Debug, Clone, Copy)]
pub struct ControlInput<'a> {
    pub k: usize,
    pub r: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
    /// Plant state. Output-feedback controllers must not read it.
    pub x: &'a DVector<f64>,
    pub x_ref: &'a DVector<f64>,
}

/// A discrete-time controller producing the requested input `u_r,k`.
pub trait Controller {
    fn step(&mut self, input: &ControlInput<'_>) -> Result<DVector<f64>>;
}

impl<F> Controller for F
where
    F: FnMut(&ControlInput<'_>) -> Result<DVector<f64>>,
{
    fn step(&mut self, input: &ControlInput<'_>) -> Result<DVector<f64>> {
        self(input)
    }
}

/// Reference signal `k ↦ (r_k, x_r,k)`.
pub trait Reference {
    fn at(&self, k: usize) -> (DVector<f64>, DVector<f64>);
}

#[derive(Debug, Clone)]
pub struct ConstantReference {
    pub r: DVector<f64>,
    pub x_ref: DVector<f64>,
}

impl Reference for ConstantReference {
    fn at(&self, _k: usize) -> (DVector<f64>, DVector<f64>) {
        (self.r.clone(), self.x_ref.clone())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub r: DVector<f64>,
    pub y: DVector<f64>,
    pub x: DVector<f64>,
    pub u_r: DVector<f64>,
    pub u: DVector<f64>,
    /// Wall time of the controller call in seconds.
    pub controller_time: f64,
}

/// Sample-by-sample log of one closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrajectory {
    pub ts: f64,
    /// `(ℓ_x, ℓ_u, ℓ_y)`.
    pub dims: (usize, usize, usize),
    pub records: Vec<StepRecord>,
}

impl ClosedLoopTrajectory {
    pub fn new(ts: f64, dims: (usize, usize, usize)) -> Self {
        Self {
            ts,
            dims,
            records: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&StepRecord> {
        self.records.last()
    }

    /// Output channel `j` over time.
    pub fn output(&self, j: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.y[j]).collect()
    }

    pub fn input(&self, j: usize) -> Vec<f64> {
        self.records.iter().map(|r| r.u[j]).collect()
    }

    pub fn max_abs_input(&self) -> f64 {
        self.records.iter().map(|r| r.u.amax()).fold(0.0, f64::max)
    }

    pub fn controller_times(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.controller_time).collect()
    }
}

/// Closed-loop failure with everything logged up to the failing sample.
#[derive(Debug)]
pub struct SimulationError {
    pub step: usize,
    pub partial: ClosedLoopTrajectory,
    pub source: Error,
}

impl std::fmt::Display for SimulationError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "closed loop aborted at step {} after {} samples: {}",
            self.step,
            self.partial.len(),
            self.source
        )
    }
}

impl std::error::Error for SimulationError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.source)
    }
}

impl From<SimulationError> for Error {
    fn from(e: SimulationError) -> Self {
        Error::Controller {
            step: e.step,
            source: Box::new(e.source),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SimulationSettings {
    pub ts: f64,
    pub duration: f64,
    /// RK4 steps per sample interval.
    pub substeps: usize,
}

impl SimulationSettings {
    pub fn new(ts: f64, duration: f64) -> Self {
        Self {
            ts,
            duration,
            substeps: 10,
        }
    }

    /// Samples at `t = 0, Ts, …, duration`.
    pub fn num_samples(&self) -> usize {
        (self.duration / self.ts + 1e-9).floor() as usize + 1
    }
}

/// Runs the sampled-data loop. Samples are taken at `t = 0, Ts, …` up to
/// and including `duration`.
pub fn simulate_closed_loop<M, C, R>(
    model: &M,
    controller: &mut C,
    limits: &SaturationLimits,
    x0: &DVector<f64>,
    settings: &SimulationSettings,
    reference: &R,
) -> std::result::Result<ClosedLoopTrajectory, SimulationError>
where
    M: PlantModel + ?Sized,
    C: Controller + ?Sized,
    R: Reference + ?Sized,
{
    let dims = (model.state_dim(), model.input_dim(), model.output_dim());
    let mut traj = ClosedLoopTrajectory::new(settings.ts, dims);
    let fail = |step, traj: ClosedLoopTrajectory, source| SimulationError {
        step,
        partial: traj,
        source,
    };
    if !(settings.ts > 0.0) || settings.substeps == 0 || !(settings.duration >= 0.0) {
        return Err(fail(
            0,
            traj,
            Error::InvalidParameter(format!("bad simulation settings {settings:?}")),
        ));
    }
    if let Err(e) = check_dim("initial state", dims.0, x0.len())
        .and_then(|_| check_dim("saturation limits", dims.1, limits.dim()))
    {
        return Err(fail(0, traj, e));
    }

    let n = settings.num_samples();
    let dt = settings.ts / settings.substeps as f64;
    let mut x = x0.clone();
    for k in 0..n {
        let y = model.output(&x);
        let (r, x_ref) = reference.at(k);
        let input = ControlInput {
            k,
            r: &r,
            y: &y,
            x: &x,
            x_ref: &x_ref,
        };
        let started = Instant::now();
        let result = controller.step(&input);
        let elapsed = started.elapsed();
        let u_r = match result.and_then(|u| check_dim("controller output", dims.1, u.len()).map(|_| u)) {
            Ok(u) => u,
            Err(e) => return Err(fail(k, traj, e)),
        };
        let u = limits.saturate(&u_r);
        if k + 1 < n {
            let mut next = x.clone();
            for _ in 0..settings.substeps {
                next = rk4_step(model, &next, &u, dt);
            }
            traj.records.push(StepRecord {
                t: k as f64 * settings.ts,
                r,
                y,
                x,
                u_r,
                u,
                controller_time: seconds(elapsed),
            });
            x = next;
        } else {
            traj.records.push(StepRecord {
                t: k as f64 * settings.ts,
                r,
                y,
                x: x.clone(),
                u_r,
                u,
                controller_time: seconds(elapsed),
            });
        }
    }
    Ok(traj)
}

fn seconds(d: Duration) -> f64 {
    d.as_secs_f64()
}
