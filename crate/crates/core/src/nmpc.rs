//! Nonlinear MPC solved by Gauss-Newton SQP.
//!
//! The decision vector is `X = [ū₀ … ū_{ℓh-1}, x̄₁ … x̄_{ℓh}]` with `x̄₀ ≡ x_k`.
//! Each iteration linearizes the defects `x̄_{i+1} - f_d(x̄_i, ū_i)` and
//! condenses them away, so the subproblem is a box-constrained QP over `Δū`
//! handed to [`crate::qp`]. Globalization is a backtracking line search on
//! the ℓ₁ merit `J + ρ‖g_eq‖₁`.

use std::fmt;
use std::sync::Arc;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::plant::{ControlInput, Controller, PlantModel, SaturationLimits};
use crate::qp::{solve_qp_with, QpProblem, QpSettings, WarmStart};

/// Discrete-time dynamics `x⁺ = f_d(x, u)` with Jacobians.
pub trait DiscreteDynamics: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64>;
    /// `(∂f_d/∂x, ∂f_d/∂u)`.
    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>);
}

/// `f_d(x, u) = x + Ts·f_c(x, u)`.
#[derive(Debug, Clone)]
pub struct EulerDiscretization<M> {
    model: M,
    ts: f64,
}

pub fn euler_discretize<M: PlantModel>(model: M, ts: f64) -> Result<EulerDiscretization<M>> {
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::InvalidParameter(format!("sample time must be positive, got {ts}")));
    }
    Ok(EulerDiscretization { model, ts })
}

impl<M> EulerDiscretization<M> {
    pub fn model(&self) -> &M {
        &self.model
    }

    pub fn ts(&self) -> f64 {
        self.ts
    }
}

impl<M: PlantModel> DiscreteDynamics for EulerDiscretization<M> {
    fn state_dim(&self) -> usize {
        self.model.state_dim()
    }

    fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        x + self.model.derivative(x, u) * self.ts
    }

    fn jacobians(&self, x: &DVector<f64>, u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        let (a, b) = self.model.jacobians(x, u);
        let n = a.nrows();
        (DMatrix::identity(n, n) + a * self.ts, b * self.ts)
    }
}

/// `x⁺ = A x + B u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDynamics {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearDynamics {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        check_dim("A columns", a.nrows(), a.ncols())?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        Ok(Self { a, b })
    }
}

impl DiscreteDynamics for LinearDynamics {
    fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }

    fn jacobians(&self, _x: &DVector<f64>, _u: &DVector<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.a.clone(), self.b.clone())
    }
}

/// Which input matrix to use for the sampled double integrator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BMatrixConvention {
    /// Zero-order-hold exact: `B = [Ts²/2; Ts]`.
    #[default]
    Exact,
    /// `B = [Ts²; Ts]`, as printed in the original example.
    PaperCompat,
}

/// `(A, B, C)` of the double integrator sampled at `ts`.
pub fn exact_discretize_double_integrator(
    ts: f64,
    convention: BMatrixConvention,
) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let a = DMatrix::from_row_slice(2, 2, &[1.0, ts, 0.0, 1.0]);
    let b0 = match convention {
        BMatrixConvention::Exact => ts * ts / 2.0,
        BMatrixConvention::PaperCompat => ts * ts,
    };
    let b = DMatrix::from_column_slice(2, 1, &[b0, ts]);
    let c = DMatrix::from_row_slice(1, 2, &[1.0, 0.0]);
    (a, b, c)
}

/// A nonnegative cost `V(reference, x)`.
pub trait CostTerm: Send + Sync {
    fn dim(&self) -> usize;
    fn value(&self, reference: &DVector<f64>, x: &DVector<f64>) -> f64;
    fn gradient(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DVector<f64>;
    /// `2 Jᵣᵀ W Jᵣ` for a cost of the form `r(x)ᵀ W r(x)`; always PSD.
    fn gauss_newton_hessian(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64>;
    fn hessian(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        self.gauss_newton_hessian(reference, x)
    }
}

/// `(x - x_ref)ᵀ W (x - x_ref)`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticCost {
    weight: DMatrix<f64>,
}

impl QuadraticCost {
    pub fn new(weight: DMatrix<f64>) -> Result<Self> {
        if !weight.is_square() || (&weight - weight.transpose()).amax() > 1e-10 * (1.0 + weight.amax()) {
            return Err(Error::InvalidParameter("cost weight must be square and symmetric".into()));
        }
        if SymmetricEigen::new(weight.clone()).eigenvalues.min() < -1e-10 * (1.0 + weight.amax()) {
            return Err(Error::InvalidParameter("cost weight must be PSD".into()));
        }
        Ok(Self { weight })
    }

    pub fn weight(&self) -> &DMatrix<f64> {
        &self.weight
    }
}

impl CostTerm for QuadraticCost {
    fn dim(&self) -> usize {
        self.weight.nrows()
    }

    fn value(&self, reference: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let e = x - reference;
        e.dot(&(&self.weight * &e))
    }

    fn gradient(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        (&self.weight * (x - reference)) * 2.0
    }

    fn gauss_newton_hessian(&self, _reference: &DVector<f64>, _x: &DVector<f64>) -> DMatrix<f64> {
        &self.weight * 2.0
    }
}

/// `rᵀ diag(w) r` with `r = (x₁, x₂, 1 - cos x₃, x₄)` measured from the
/// reference. Minimized with the pendulum upright at any multiple of 2π.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UprightPendulumCost {
    pub weights: [f64; 4],
}

impl Default for UprightPendulumCost {
    fn default() -> Self {
        Self {
            weights: [30.0, 20.0, 60.0, 20.0],
        }
    }
}

impl UprightPendulumCost {
    pub fn new(weights: [f64; 4]) -> Result<Self> {
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidParameter(format!("weights must be nonnegative, got {weights:?}")));
        }
        Ok(Self { weights })
    }

    fn residual(reference: &DVector<f64>, x: &DVector<f64>) -> [f64; 4] {
        [
            x[0] - reference[0],
            x[1] - reference[1],
            1.0 - (x[2] - reference[2]).cos(),
            x[3] - reference[3],
        ]
    }
}

impl CostTerm for UprightPendulumCost {
    fn dim(&self) -> usize {
        4
    }

    fn value(&self, reference: &DVector<f64>, x: &DVector<f64>) -> f64 {
        let r = Self::residual(reference, x);
        (0..4).map(|i| self.weights[i] * r[i] * r[i]).sum()
    }

    fn gradient(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
        let r = Self::residual(reference, x);
        let s = (x[2] - reference[2]).sin();
        let w = &self.weights;
        DVector::from_column_slice(&[
            2.0 * w[0] * r[0],
            2.0 * w[1] * r[1],
            2.0 * w[2] * r[2] * s,
            2.0 * w[3] * r[3],
        ])
    }

    fn gauss_newton_hessian(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let s = (x[2] - reference[2]).sin();
        let w = &self.weights;
        DMatrix::from_diagonal(&DVector::from_column_slice(&[
            2.0 * w[0],
            2.0 * w[1],
            2.0 * w[2] * s * s,
            2.0 * w[3],
        ]))
    }

    fn hessian(&self, reference: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
        let mut h = self.gauss_newton_hessian(reference, x);
        let d = x[2] - reference[2];
        h[(2, 2)] += 2.0 * self.weights[2] * (1.0 - d.cos()) * d.cos();
        h
    }
}

/// Curvature used for the state and input cost blocks of the subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HessianApproximation {
    /// `2 Jᵣᵀ W Jᵣ`.
    GaussNewton,
    /// Exact cost Hessian with negative eigenvalues clipped to zero, block
    /// by block. Coincides with Gauss-Newton for quadratic costs.
    #[default]
    ClippedExact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SqpSettings {
    pub max_iter: usize,
    /// Stop once `‖ΔX‖_∞` falls below this.
    pub step_tol: f64,
    pub constraint_tol: f64,
    /// Sufficient-decrease constant of the line search.
    pub armijo: f64,
    /// Line search tries `α = 1, ½, …, 2^-max_backtracks`.
    pub max_backtracks: u32,
    pub qp_tol: f64,
    pub hessian: HessianApproximation,
}

impl Default for SqpSettings {
    fn default() -> Self {
        Self {
            max_iter: 200,
            step_tol: 1e-6,
            constraint_tol: 1e-6,
            armijo: 1e-4,
            max_backtracks: 10,
            qp_tol: 1e-8,
            hessian: HessianApproximation::default(),
        }
    }
}

#[derive(Clone)]
pub struct NmpcConfig {
    dynamics: Arc<dyn DiscreteDynamics>,
    horizon: usize,
    stage_cost: Arc<dyn CostTerm>,
    terminal_cost: Arc<dyn CostTerm>,
    input_cost: Arc<dyn CostTerm>,
    limits: SaturationLimits,
    sqp: SqpSettings,
}

impl fmt::Debug for NmpcConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NmpcConfig")
            .field("state_dim", &self.state_dim())
            .field("input_dim", &self.input_dim())
            .field("horizon", &self.horizon)
            .field("limits", &self.limits)
            .field("sqp", &self.sqp)
            .finish_non_exhaustive()
    }
}

impl NmpcConfig {
    pub fn new(
        dynamics: Arc<dyn DiscreteDynamics>,
        horizon: usize,
        stage_cost: Arc<dyn CostTerm>,
        terminal_cost: Arc<dyn CostTerm>,
        input_cost: Arc<dyn CostTerm>,
        limits: SaturationLimits,
        sqp: SqpSettings,
    ) -> Result<Self> {
        let nx = dynamics.state_dim();
        let nu = dynamics.input_dim();
        check_dim("stage cost", nx, stage_cost.dim())?;
        check_dim("terminal cost", nx, terminal_cost.dim())?;
        check_dim("input cost", nu, input_cost.dim())?;
        check_dim("input limits", nu, limits.dim())?;
        if horizon == 0 {
            return Err(Error::InvalidParameter("NMPC horizon must be at least 1".into()));
        }
        if sqp.max_iter == 0 || !(sqp.step_tol > 0.0) || !(sqp.constraint_tol > 0.0) || !(sqp.qp_tol > 0.0) {
            return Err(Error::InvalidParameter(format!("bad SQP settings {sqp:?}")));
        }
        Ok(Self {
            dynamics,
            horizon,
            stage_cost,
            terminal_cost,
            input_cost,
            limits,
            sqp,
        })
    }

    pub fn dynamics(&self) -> &dyn DiscreteDynamics {
        self.dynamics.as_ref()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn limits(&self) -> &SaturationLimits {
        &self.limits
    }

    pub fn sqp(&self) -> &SqpSettings {
        &self.sqp
    }

    pub fn state_dim(&self) -> usize {
        self.dynamics.state_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.dynamics.input_dim()
    }

    /// `ℓh (ℓx + ℓu)`.
    pub fn decision_len(&self) -> usize {
        self.horizon * (self.state_dim() + self.input_dim())
    }

    pub fn with_sqp(mut self, sqp: SqpSettings) -> Self {
        self.sqp = sqp;
        self
    }

    fn u_offset(&self, i: usize) -> usize {
        i * self.input_dim()
    }

    /// Offset of `x̄_i`, `i ∈ 1..=ℓh`.
    fn x_offset(&self, i: usize) -> usize {
        self.horizon * self.input_dim() + (i - 1) * self.state_dim()
    }

    fn input(&self, x: &DVector<f64>, i: usize) -> DVector<f64> {
        x.rows(self.u_offset(i), self.input_dim()).into_owned()
    }

    /// `x̄_i`, with `x̄₀ = x_k`.
    fn state(&self, x_k: &DVector<f64>, x: &DVector<f64>, i: usize) -> DVector<f64> {
        if i == 0 {
            x_k.clone()
        } else {
            x.rows(self.x_offset(i), self.state_dim()).into_owned()
        }
    }

    fn state_cost(&self, i: usize) -> &dyn CostTerm {
        if i == self.horizon {
            self.terminal_cost.as_ref()
        } else {
            self.stage_cost.as_ref()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpEvaluation {
    pub j: f64,
    pub g_eq: DVector<f64>,
    pub g_ineq: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NmpcSolution {
    /// `[ū₀ … ū_{ℓh-1}, x̄₁ … x̄_{ℓh}]`.
    pub x: DVector<f64>,
    pub iterations: usize,
    pub eq_residual: f64,
    pub converged: bool,
    pub objective: f64,
}

impl NmpcSolution {
    /// `ū_i` given the input dimension.
    pub fn input(&self, i: usize, input_dim: usize) -> DVector<f64> {
        self.x.rows(i * input_dim, input_dim).into_owned()
    }
}

fn check_decision(config: &NmpcConfig, x_k: &DVector<f64>, x_ref: &DVector<f64>, x: &DVector<f64>) -> Result<()> {
    check_dim("NMPC state", config.state_dim(), x_k.len())?;
    check_dim("NMPC state reference", config.state_dim(), x_ref.len())?;
    check_dim("NMPC decision vector", config.decision_len(), x.len())
}

fn objective(config: &NmpcConfig, x_k: &DVector<f64>, x_ref: &DVector<f64>, x: &DVector<f64>) -> f64 {
    let zero_u = DVector::zeros(config.input_dim());
    let mut j = 0.0;
    for i in 0..config.horizon {
        j += config.input_cost.value(&zero_u, &config.input(x, i));
    }
    for i in 1..=config.horizon {
        j += config.state_cost(i).value(x_ref, &config.state(x_k, x, i));
    }
    j
}

fn defects(config: &NmpcConfig, x_k: &DVector<f64>, x: &DVector<f64>) -> DVector<f64> {
    let nx = config.state_dim();
    let mut g = DVector::zeros(config.horizon * nx);
    for i in 0..config.horizon {
        let next = config.dynamics.step(&config.state(x_k, x, i), &config.input(x, i));
        let d = config.state(x_k, x, i + 1) - next;
        g.rows_mut(i * nx, nx).copy_from(&d);
    }
    g
}

/// Cost, defects and input box rows at `X`.
pub fn eval_nlp(
    config: &NmpcConfig,
    x_k: &DVector<f64>,
    x_ref: &DVector<f64>,
    x: &DVector<f64>,
) -> Result<NlpEvaluation> {
    check_decision(config, x_k, x_ref, x)?;
    let nu = config.input_dim();
    let n = config.horizon * nu;
    let mut g_ineq = DVector::zeros(2 * n);
    for i in 0..n {
        g_ineq[i] = x[i] - config.limits.u_max()[i % nu];
        g_ineq[n + i] = -x[i] + config.limits.u_min()[i % nu];
    }
    Ok(NlpEvaluation {
        j: objective(config, x_k, x_ref, x),
        g_eq: defects(config, x_k, x),
        g_ineq,
    })
}

/// Simulates `f_d` from `x_k` under the inputs stored in `X` and overwrites
/// the state blocks, so that `g_eq(X) = 0`.
pub fn rollout(config: &NmpcConfig, x_k: &DVector<f64>, x: &mut DVector<f64>) {
    let nx = config.state_dim();
    let mut state = x_k.clone();
    for i in 0..config.horizon {
        state = config.dynamics.step(&state, &config.input(x, i));
        x.rows_mut(config.x_offset(i + 1), nx).copy_from(&state);
    }
}

/// Rollout under `ū ≡ 0`.
pub fn cold_start(config: &NmpcConfig, x_k: &DVector<f64>) -> Result<DVector<f64>> {
    check_dim("NMPC state", config.state_dim(), x_k.len())?;
    let mut x = DVector::zeros(config.decision_len());
    let zero = DVector::zeros(config.input_dim());
    if !config.limits.contains(&zero, 0.0) {
        let mid = (config.limits.u_min() + config.limits.u_max()) * 0.5;
        for i in 0..config.horizon {
            x.rows_mut(config.u_offset(i), config.input_dim()).copy_from(&mid);
        }
    }
    rollout(config, x_k, &mut x);
    Ok(x)
}

/// Receding-horizon shift: drop stage 0, repeat the last stage.
pub fn shift_warm_start(config: &NmpcConfig, previous: &DVector<f64>) -> DVector<f64> {
    let nu = config.input_dim();
    let nx = config.state_dim();
    let h = config.horizon;
    let mut x = previous.clone();
    for i in 0..h {
        let src = (i + 1).min(h - 1);
        x.rows_mut(config.u_offset(i), nu)
            .copy_from(&previous.rows(config.u_offset(src), nu));
    }
    for i in 1..=h {
        let src = (i + 1).min(h);
        x.rows_mut(config.x_offset(i), nx)
            .copy_from(&previous.rows(config.x_offset(src), nx));
    }
    x
}

/// Linearization of the NLP at an iterate, condensed onto `Δū`.
struct Condensed {
    /// `∂Δx̄/∂Δū`, lower block triangular.
    g: DMatrix<f64>,
    /// Response of `Δx̄` to the current defects.
    e: DVector<f64>,
    /// Reduced Gauss-Newton Hessian and gradient.
    h: DMatrix<f64>,
    q: DVector<f64>,
    grad_u: DVector<f64>,
    grad_x: DVector<f64>,
    /// Block-diagonal Gauss-Newton state/input Hessians.
    hx_blocks: Vec<DMatrix<f64>>,
    hu_blocks: Vec<DMatrix<f64>>,
    /// `c_i = f_d(x̄_i, ū_i) - x̄_{i+1}`.
    c: DVector<f64>,
}

fn condense(config: &NmpcConfig, x_k: &DVector<f64>, x_ref: &DVector<f64>, x: &DVector<f64>) -> Condensed {
    let nx = config.state_dim();
    let nu = config.input_dim();
    let h = config.horizon;
    let zero_u = DVector::zeros(nu);

    let mut a_blocks = Vec::with_capacity(h);
    let mut b_blocks = Vec::with_capacity(h);
    let mut c = DVector::zeros(h * nx);
    let mut grad_u = DVector::zeros(h * nu);
    let mut grad_x = DVector::zeros(h * nx);
    let mut hu_blocks = Vec::with_capacity(h);
    let mut hx_blocks = Vec::with_capacity(h);
    for i in 0..h {
        let xi = config.state(x_k, x, i);
        let ui = config.input(x, i);
        let next = config.state(x_k, x, i + 1);
        let (a, b) = config.dynamics.jacobians(&xi, &ui);
        a_blocks.push(a);
        b_blocks.push(b);
        c.rows_mut(i * nx, nx)
            .copy_from(&(config.dynamics.step(&xi, &ui) - &next));
        grad_u
            .rows_mut(i * nu, nu)
            .copy_from(&config.input_cost.gradient(&zero_u, &ui));
        hu_blocks.push(cost_curvature(config, config.input_cost.as_ref(), &zero_u, &ui));
        let cost = config.state_cost(i + 1);
        grad_x.rows_mut(i * nx, nx).copy_from(&cost.gradient(x_ref, &next));
        hx_blocks.push(cost_curvature(config, cost, x_ref, &next));
    }

    // Row block i holds Δx̄_{i+1} = A_i Δx̄_i + B_i Δū_i + c_i.
    let mut g = DMatrix::zeros(h * nx, h * nu);
    for j in 0..h {
        let mut m = b_blocks[j].clone();
        g.view_mut((j * nx, j * nu), (nx, nu)).copy_from(&m);
        for i in j + 1..h {
            m = &a_blocks[i] * m;
            g.view_mut((i * nx, j * nu), (nx, nu)).copy_from(&m);
        }
    }
    let mut e = DVector::zeros(h * nx);
    let mut prev = DVector::zeros(nx);
    for i in 0..h {
        let cur = &a_blocks[i] * &prev + c.rows(i * nx, nx);
        e.rows_mut(i * nx, nx).copy_from(&cur);
        prev = cur;
    }

    let hxg = block_diag_mul(&hx_blocks, &g);
    let mut hess = g.tr_mul(&hxg);
    for (i, hu) in hu_blocks.iter().enumerate() {
        let mut v = hess.view_mut((i * nu, i * nu), (nu, nu));
        v += hu;
    }
    let hx_e = block_diag_mul_vec(&hx_blocks, &e);
    let q = g.tr_mul(&(&grad_x + hx_e)) + &grad_u;

    Condensed {
        g,
        e,
        h: hess,
        q,
        grad_u,
        grad_x,
        hx_blocks,
        hu_blocks,
        c,
    }
}

fn cost_curvature(config: &NmpcConfig, cost: &dyn CostTerm, reference: &DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    match config.sqp.hessian {
        HessianApproximation::GaussNewton => cost.gauss_newton_hessian(reference, x),
        HessianApproximation::ClippedExact => {
            let h = cost.hessian(reference, x);
            let eig = SymmetricEigen::new((&h + h.transpose()) * 0.5);
            if eig.eigenvalues.min() >= 0.0 {
                return h;
            }
            let d = eig.eigenvalues.map(|l| l.max(0.0));
            &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
        }
    }
}

fn block_diag_mul(blocks: &[DMatrix<f64>], m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m.nrows(), m.ncols());
    let mut row = 0;
    for b in blocks {
        let k = b.nrows();
        out.rows_mut(row, k).copy_from(&(b * m.rows(row, k)));
        row += k;
    }
    out
}

fn block_diag_mul_vec(blocks: &[DMatrix<f64>], v: &DVector<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(v.len());
    let mut row = 0;
    for b in blocks {
        let k = b.nrows();
        out.rows_mut(row, k).copy_from(&(b * v.rows(row, k)));
        row += k;
    }
    out
}

fn block_quad(blocks: &[DMatrix<f64>], v: &DVector<f64>) -> f64 {
    v.dot(&block_diag_mul_vec(blocks, v))
}

fn input_box_qp(config: &NmpcConfig, x: &DVector<f64>, h: DMatrix<f64>, q: DVector<f64>) -> (QpProblem, Vec<usize>) {
    let nu = config.input_dim();
    let n = config.horizon * nu;
    let mut gamma = DMatrix::zeros(2 * n, n);
    let mut bound = DVector::zeros(2 * n);
    let mut active = Vec::new();
    for i in 0..n {
        gamma[(i, i)] = 1.0;
        gamma[(n + i, i)] = -1.0;
        bound[i] = (config.limits.u_max()[i % nu] - x[i]).max(0.0);
        bound[n + i] = (x[i] - config.limits.u_min()[i % nu]).max(0.0);
        if bound[i] == 0.0 {
            active.push(i);
        } else if bound[n + i] == 0.0 {
            active.push(n + i);
        }
    }
    let qp = QpProblem::new(h, q, gamma, bound).expect("box QP dimensions are consistent by construction");
    (qp, active)
}

fn project_inputs(config: &NmpcConfig, x: &mut DVector<f64>) {
    let nu = config.input_dim();
    for i in 0..config.horizon * nu {
        x[i] = x[i].clamp(config.limits.u_min()[i % nu], config.limits.u_max()[i % nu]);
    }
}

/// Runs the SQP loop from `x_warm`.
pub fn sqp_solve(
    config: &NmpcConfig,
    x_k: &DVector<f64>,
    x_ref: &DVector<f64>,
    x_warm: &DVector<f64>,
) -> Result<NmpcSolution> {
    check_decision(config, x_k, x_ref, x_warm)?;
    let s = &config.sqp;
    let n_u = config.horizon * config.input_dim();
    let qp_settings = QpSettings {
        tol: s.qp_tol,
        max_iter: None,
    };

    let mut x = x_warm.clone();
    project_inputs(config, &mut x);
    let mut rho = 0.0_f64;
    let mut converged = false;
    let mut iterations = 0;
    let mut step_norm = f64::INFINITY;

    let merit = |x: &DVector<f64>, rho: f64| objective(config, x_k, x_ref, x) + rho * defects(config, x_k, x).lp_norm(1);

    while iterations < s.max_iter {
        iterations += 1;
        let cond = condense(config, x_k, x_ref, &x);
        let u_cur = x.rows(0, n_u).into_owned();
        let (qp, active) = input_box_qp(config, &u_cur, cond.h.clone(), cond.q.clone());
        let warm = WarmStart {
            point: Some(DVector::zeros(n_u)),
            active_set: active,
        };
        let sol = solve_qp_with(&qp, &qp_settings, Some(&warm)).into_result()?;
        let du = sol.u_star;
        let dx = &cond.g * &du + &cond.e;
        step_norm = du.amax().max(dx.amax());

        if step_norm <= s.step_tol {
            converged = true;
            break;
        }

        let c_norm = cond.c.lp_norm(1);
        let slope_j = cond.grad_u.dot(&du) + cond.grad_x.dot(&dx);
        let curvature = (block_quad(&cond.hu_blocks, &du) + block_quad(&cond.hx_blocks, &dx)).max(0.0);
        if c_norm > 0.0 {
            let required = (slope_j + 0.5 * curvature) / (0.9 * c_norm);
            if required > rho {
                rho = required * 1.01;
            }
        }
        let directional = slope_j - rho * c_norm;
        let m0 = merit(&x, rho);
        let mut alpha = 1.0;
        let mut accepted = false;
        for _ in 0..=s.max_backtracks {
            let mut trial = x.clone();
            trial.rows_mut(0, n_u).axpy(alpha, &du, 1.0);
            trial.rows_mut(n_u, dx.len()).axpy(alpha, &dx, 1.0);
            project_inputs(config, &mut trial);
            if merit(&trial, rho) <= m0 + s.armijo * alpha * directional.min(0.0) {
                x = trial;
                accepted = true;
                break;
            }
            alpha *= 0.5;
        }
        if !accepted {
            // No decrease along the search direction at the finest step:
            // treat the iterate as stationary to working precision.
            step_norm = alpha * step_norm;
            if cond.c.amax() <= s.constraint_tol && step_norm <= s.step_tol.sqrt() {
                converged = true;
            }
            break;
        }
    }

    let eq_residual_before = defects(config, x_k, &x).amax();
    rollout(config, x_k, &mut x);
    let eq_residual = defects(config, x_k, &x).amax();
    let solution = NmpcSolution {
        objective: objective(config, x_k, x_ref, &x),
        x,
        iterations,
        eq_residual,
        converged: converged && eq_residual <= s.constraint_tol,
    };
    if solution.converged {
        Ok(solution)
    } else {
        Err(Error::NonConvergence {
            iterations,
            step_norm,
            eq_residual: eq_residual_before,
            best: Box::new(solution),
        })
    }
}

#[derive(Debug, Clone)]
pub struct NmpcStep {
    pub u: DVector<f64>,
    pub solution: NmpcSolution,
    pub solve_time: Duration,
}

/// One receding-horizon step; `warm` is the previous solution, if any.
pub fn nmpc_step(
    config: &NmpcConfig,
    x_k: &DVector<f64>,
    x_ref: &DVector<f64>,
    warm: Option<&NmpcSolution>,
) -> Result<NmpcStep> {
    let started = Instant::now();
    let start = match warm {
        Some(prev) => {
            check_dim("NMPC warm start", config.decision_len(), prev.x.len())?;
            shift_warm_start(config, &prev.x)
        }
        None => cold_start(config, x_k)?,
    };
    let solution = sqp_solve(config, x_k, x_ref, &start)?;
    let u = solution.input(0, config.input_dim());
    Ok(NmpcStep {
        u,
        solution,
        solve_time: started.elapsed(),
    })
}

/// NMPC as a closed-loop controller; keeps its own warm start.
#[derive(Debug, Clone)]
pub struct NmpcController {
    config: NmpcConfig,
    previous: Option<NmpcSolution>,
    iterations: Vec<usize>,
}

impl NmpcController {
    pub fn new(config: NmpcConfig) -> Self {
        Self {
            config,
            previous: None,
            iterations: Vec::new(),
        }
    }

    /// SQP iterations used at each step so far.
    pub fn iterations(&self) -> &[usize] {
        &self.iterations
    }
}

impl Controller for NmpcController {
    fn step(&mut self, input: &ControlInput<'_>) -> Result<DVector<f64>> {
        let step = nmpc_step(&self.config, input.x, input.x_ref, self.previous.as_ref())?;
        self.iterations.push(step.solution.iterations);
        self.previous = Some(step.solution);
        Ok(step.u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{cart_pendulum_model, double_integrator_model, CartPendulumParams};
    use nalgebra::{dmatrix, dvector};
    use std::f64::consts::PI;

    fn pendulum_config(horizon: usize) -> NmpcConfig {
        let model = cart_pendulum_model(CartPendulumParams::default()).unwrap();
        let cost: Arc<dyn CostTerm> = Arc::new(UprightPendulumCost::default());
        NmpcConfig::new(
            Arc::new(euler_discretize(model, 0.02).unwrap()),
            horizon,
            cost.clone(),
            cost,
            Arc::new(QuadraticCost::new(dmatrix![50.0]).unwrap()),
            SaturationLimits::symmetric(1, 30.0).unwrap(),
            SqpSettings::default(),
        )
        .unwrap()
    }

    #[test]
    fn euler_double_integrator() {
        let f = euler_discretize(double_integrator_model(), 0.02).unwrap();
        let x = f.step(&dvector![0.0, 0.0], &dvector![1.0]);
        assert_eq!(x, dvector![0.0, 0.02]);
        assert!(euler_discretize(double_integrator_model(), 0.0).is_err());
    }

    #[test]
    fn euler_preserves_pendulum_equilibrium() {
        let f = euler_discretize(cart_pendulum_model(CartPendulumParams::default()).unwrap(), 0.02).unwrap();
        assert_eq!(f.step(&DVector::zeros(4), &dvector![0.0]), DVector::<f64>::zeros(4));
    }

    #[test]
    fn double_integrator_discretization() {
        let (a, b, c) = exact_discretize_double_integrator(0.01, BMatrixConvention::Exact);
        assert_eq!(a, dmatrix![1.0, 0.01; 0.0, 1.0]);
        assert!((b[0] - 5e-5).abs() < 1e-18 && b[1] == 0.01);
        assert_eq!(c, dmatrix![1.0, 0.0]);
        let (_, b, _) = exact_discretize_double_integrator(1.0, BMatrixConvention::Exact);
        assert_eq!(b, dmatrix![0.5; 1.0]);
        let (_, b, _) = exact_discretize_double_integrator(0.01, BMatrixConvention::PaperCompat);
        assert!((b[0] - 1e-4).abs() < 1e-18);
    }

    #[test]
    fn rollout_has_zero_defects() {
        let cfg = pendulum_config(20);
        let x_k = dvector![0.1, 0.0, 2.0, 0.3];
        let mut x = DVector::zeros(cfg.decision_len());
        for i in 0..20 {
            x[i] = (i as f64 * 0.7).sin() * 10.0;
        }
        rollout(&cfg, &x_k, &mut x);
        let ev = eval_nlp(&cfg, &x_k, &DVector::zeros(4), &x).unwrap();
        assert!(ev.g_eq.amax() < 1e-12);
        assert!(ev.g_ineq.iter().all(|&g| g < 0.0));
        assert_eq!(ev.g_ineq.len(), 40);
    }

    #[test]
    fn zero_decision_has_zero_cost() {
        let cfg = pendulum_config(10);
        let z = DVector::zeros(4);
        let ev = eval_nlp(&cfg, &z, &z, &DVector::zeros(cfg.decision_len())).unwrap();
        assert_eq!(ev.j, 0.0);
        assert!(eval_nlp(&cfg, &z, &z, &DVector::zeros(3)).is_err());
    }

    #[test]
    fn upright_is_a_fixed_point() {
        let cfg = pendulum_config(30);
        let z = DVector::zeros(4);
        let step = nmpc_step(&cfg, &z, &z, None).unwrap();
        assert_eq!(step.u, dvector![0.0]);
        assert!(step.solution.converged);
    }

    #[test]
    fn warm_start_at_solution_is_immediate() {
        let cfg = pendulum_config(30);
        let z = DVector::zeros(4);
        let x_k = dvector![0.0, 0.0, 0.3, 0.0];
        let first = sqp_solve(&cfg, &x_k, &z, &cold_start(&cfg, &x_k).unwrap()).unwrap();
        let again = sqp_solve(&cfg, &x_k, &z, &first.x).unwrap();
        assert_eq!(again.iterations, 1);
    }

    #[test]
    fn hanging_start_converges() {
        // Under the shipped weights the hanging equilibrium is a minimizer.
        let cfg = pendulum_config(100);
        let x_k = dvector![0.0, 0.0, PI, 0.0];
        let step = nmpc_step(&cfg, &x_k, &DVector::zeros(4), None).unwrap();
        assert!(step.solution.converged);
        assert!(step.solution.eq_residual <= 1e-6);
        assert!(step.u[0].abs() <= 30.0);
    }

    #[test]
    fn upright_cost_hessian_matches_differences() {
        let c = UprightPendulumCost::default();
        let r = dvector![0.1, -0.2, 0.3, 0.0];
        let x = dvector![0.5, 1.0, 2.0, -1.0];
        let h = c.hessian(&r, &x);
        let eps = 1e-6;
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            let col = (c.gradient(&r, &xp) - c.gradient(&r, &xm)) / (2.0 * eps);
            assert!((col - h.column(j)).amax() < 1e-5);
        }
        let g = c.gradient(&r, &x);
        for j in 0..4 {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[j] += eps;
            xm[j] -= eps;
            assert!(((c.value(&r, &xp) - c.value(&r, &xm)) / (2.0 * eps) - g[j]).abs() < 1e-5);
        }
    }

    #[test]
    fn shift_repeats_last_stage() {
        let lin = LinearDynamics::new(dmatrix![1.0], dmatrix![1.0]).unwrap();
        let q: Arc<dyn CostTerm> = Arc::new(QuadraticCost::new(dmatrix![1.0]).unwrap());
        let cfg = NmpcConfig::new(
            Arc::new(lin),
            3,
            q.clone(),
            q.clone(),
            q,
            SaturationLimits::symmetric(1, 5.0).unwrap(),
            SqpSettings::default(),
        )
        .unwrap();
        let shifted = shift_warm_start(&cfg, &dvector![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        assert_eq!(shifted, dvector![2.0, 3.0, 3.0, 5.0, 6.0, 6.0]);
    }
}
