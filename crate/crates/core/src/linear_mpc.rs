//! Condensed linear MPC.
//!
//! The predicted states are eliminated through `x̄ = Γ_u U + Γ_x x_k`, leaving
//! a QP over the stacked inputs `U = [ū₀; …; ū_{ℓh-1}]`:
//!
//! ```text
//!     H = 2 Γ_uᵀ Q_mpc Γ_u + R_mpc
//!     q = -2 Γ_uᵀ Q_mpc (1 ⊗ x_ref - Γ_x x_k)
//!     [I; -I] U ≤ [1 ⊗ u_max; -1 ⊗ u_min]
//! ```

use std::time::{Duration, Instant};

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

use crate::error::{check_dim, Error, Result};
use crate::plant::{ControlInput, Controller, SaturationLimits};
use crate::qp::{solve_qp_with, QpProblem, QpSettings, QpSolution, WarmStart};

#[derive(Debug, Clone)]
pub struct LinearMpcConfig {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    horizon: usize,
    q_bar: DMatrix<f64>,
    q_bar_f: DMatrix<f64>,
    r_bar: DMatrix<f64>,
    limits: SaturationLimits,
}

impl LinearMpcConfig {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        c: DMatrix<f64>,
        horizon: usize,
        q_bar: DMatrix<f64>,
        q_bar_f: DMatrix<f64>,
        r_bar: DMatrix<f64>,
        limits: SaturationLimits,
    ) -> Result<Self> {
        let nx = a.nrows();
        let nu = b.ncols();
        check_dim("A columns", nx, a.ncols())?;
        check_dim("B rows", nx, b.nrows())?;
        check_dim("C columns", nx, c.ncols())?;
        check_dim("Q̄ size", nx, q_bar.nrows())?;
        check_dim("Q̄ size", nx, q_bar.ncols())?;
        check_dim("Q̄_f size", nx, q_bar_f.nrows())?;
        check_dim("Q̄_f size", nx, q_bar_f.ncols())?;
        check_dim("R̄ size", nu, r_bar.nrows())?;
        check_dim("R̄ size", nu, r_bar.ncols())?;
        check_dim("input limits", nu, limits.dim())?;
        if horizon == 0 {
            return Err(Error::InvalidParameter("MPC horizon must be at least 1".into()));
        }
        for (name, m) in [("Q̄", &q_bar), ("Q̄_f", &q_bar_f)] {
            if !is_symmetric(m) || SymmetricEigen::new(m.clone()).eigenvalues.min() < -1e-10 * (1.0 + m.amax()) {
                return Err(Error::InvalidParameter(format!("{name} must be symmetric PSD")));
            }
        }
        if !is_symmetric(&r_bar) || Cholesky::new(r_bar.clone()).is_none() {
            return Err(Error::InvalidParameter("R̄ must be symmetric positive definite".into()));
        }
        Ok(Self {
            a,
            b,
            c,
            horizon,
            q_bar,
            q_bar_f,
            r_bar,
            limits,
        })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn q_bar(&self) -> &DMatrix<f64> {
        &self.q_bar
    }

    pub fn q_bar_f(&self) -> &DMatrix<f64> {
        &self.q_bar_f
    }

    pub fn r_bar(&self) -> &DMatrix<f64> {
        &self.r_bar
    }

    pub fn limits(&self) -> &SaturationLimits {
        &self.limits
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-10 * (1.0 + m.amax())
}

/// Stacked prediction `x̄ = Γ_u U + Γ_x x_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrices {
    pub gamma_u: DMatrix<f64>,
    pub gamma_x: DMatrix<f64>,
}

pub fn build_prediction_matrices(a: &DMatrix<f64>, b: &DMatrix<f64>, horizon: usize) -> PredictionMatrices {
    let nx = a.nrows();
    let nu = b.ncols();
    let mut gamma_u = DMatrix::zeros(horizon * nx, horizon * nu);
    let mut gamma_x = DMatrix::zeros(horizon * nx, nx);

    // powers[i] = A^i B
    let mut a_pow_b = Vec::with_capacity(horizon);
    let mut current = b.clone();
    let mut a_pow = a.clone();
    for i in 0..horizon {
        a_pow_b.push(current.clone());
        current = a * &current;
        gamma_x.view_mut((i * nx, 0), (nx, nx)).copy_from(&a_pow);
        a_pow = a * &a_pow;
    }
    for i in 0..horizon {
        for j in 0..=i {
            gamma_u
                .view_mut((i * nx, j * nu), (nx, nu))
                .copy_from(&a_pow_b[i - j]);
        }
    }
    PredictionMatrices { gamma_u, gamma_x }
}

/// The pieces of the condensed QP that do not depend on the current state.
#[derive(Debug, Clone)]
pub struct CondensedMpc {
    prediction: PredictionMatrices,
    /// `-2 Γ_uᵀ Q_mpc`
    linear_map: DMatrix<f64>,
    h: DMatrix<f64>,
    gamma: DMatrix<f64>,
    nu: DVector<f64>,
    nx: usize,
    n_inputs: usize,
    horizon: usize,
}

impl CondensedMpc {
    pub fn new(config: &LinearMpcConfig) -> Self {
        let nx = config.state_dim();
        let nu = config.input_dim();
        let h_len = config.horizon;
        let prediction = build_prediction_matrices(&config.a, &config.b, h_len);

        let mut q_mpc = DMatrix::zeros(h_len * nx, h_len * nx);
        for i in 0..h_len {
            let block = if i + 1 == h_len { &config.q_bar_f } else { &config.q_bar };
            q_mpc.view_mut((i * nx, i * nx), (nx, nx)).copy_from(block);
        }
        let mut r_mpc = DMatrix::zeros(h_len * nu, h_len * nu);
        for i in 0..h_len {
            r_mpc.view_mut((i * nu, i * nu), (nu, nu)).copy_from(&config.r_bar);
        }

        let gu_t_q = prediction.gamma_u.tr_mul(&q_mpc);
        let h = &gu_t_q * &prediction.gamma_u * 2.0 + r_mpc;
        let linear_map = gu_t_q * -2.0;

        let n = h_len * nu;
        let mut gamma = DMatrix::zeros(2 * n, n);
        let mut nu_vec = DVector::zeros(2 * n);
        for i in 0..n {
            gamma[(i, i)] = 1.0;
            gamma[(n + i, i)] = -1.0;
            nu_vec[i] = config.limits.u_max()[i % nu];
            nu_vec[n + i] = -config.limits.u_min()[i % nu];
        }
        Self {
            prediction,
            linear_map,
            h,
            gamma,
            nu: nu_vec,
            nx,
            n_inputs: nu,
            horizon: h_len,
        }
    }

    pub fn prediction(&self) -> &PredictionMatrices {
        &self.prediction
    }

    pub fn hessian(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn linear_term(&self, x_k: &DVector<f64>, x_ref: &DVector<f64>) -> DVector<f64> {
        let mut target = DVector::zeros(self.horizon * self.nx);
        for i in 0..self.horizon {
            target.rows_mut(i * self.nx, self.nx).copy_from(x_ref);
        }
        target -= &self.prediction.gamma_x * x_k;
        &self.linear_map * target
    }

    pub fn problem(&self, x_k: &DVector<f64>, x_ref: &DVector<f64>) -> QpProblem {
        QpProblem::new(
            self.h.clone(),
            self.linear_term(x_k, x_ref),
            self.gamma.clone(),
            self.nu.clone(),
        )
        .expect("condensed QP dimensions are consistent by construction")
    }

    /// Receding-horizon warm start: drop the first block, repeat the last.
    pub fn shifted_warm_start(&self, previous: &QpSolution) -> WarmStart {
        let nu = self.n_inputs;
        let n = self.horizon * nu;
        let prev = &previous.u_star;
        let mut point = DVector::zeros(n);
        for i in 0..n {
            let src = (i + nu).min(n - nu + i % nu);
            point[i] = prev[src];
        }
        let mut active = Vec::new();
        for &row in &previous.active_set {
            let side = row / n;
            let within = row % n;
            let block = within / nu;
            if block >= 1 {
                active.push(side * n + within - nu);
            }
            if block + 1 == self.horizon {
                active.push(row);
            }
        }
        WarmStart {
            point: Some(point),
            active_set: active,
        }
    }
}

pub fn build_condensed_qp(config: &LinearMpcConfig, x_k: &DVector<f64>, x_ref: &DVector<f64>) -> QpProblem {
    CondensedMpc::new(config).problem(x_k, x_ref)
}

#[derive(Debug, Clone)]
pub struct MpcStep {
    pub u: DVector<f64>,
    pub solution: QpSolution,
    pub solve_time: Duration,
}

/// One receding-horizon step. `warm` is the previous step's solution, if any.
pub fn lmpc_step(
    config: &LinearMpcConfig,
    x_k: &DVector<f64>,
    x_ref: &DVector<f64>,
    warm: Option<&QpSolution>,
) -> Result<MpcStep> {
    let condensed = CondensedMpc::new(config);
    step_condensed(&condensed, x_k, x_ref, warm, &QpSettings::default())
}

fn step_condensed(
    condensed: &CondensedMpc,
    x_k: &DVector<f64>,
    x_ref: &DVector<f64>,
    warm: Option<&QpSolution>,
    settings: &QpSettings,
) -> Result<MpcStep> {
    check_dim("MPC state", condensed.nx, x_k.len())?;
    check_dim("MPC state reference", condensed.nx, x_ref.len())?;
    let started = Instant::now();
    let problem = condensed.problem(x_k, x_ref);
    let warm = warm.map(|w| condensed.shifted_warm_start(w));
    let solution = solve_qp_with(&problem, settings, warm.as_ref()).into_result()?;
    let u = solution.u_star.rows(0, condensed.n_inputs).into_owned();
    Ok(MpcStep {
        u,
        solution,
        solve_time: started.elapsed(),
    })
}

/// Linear MPC as a closed-loop controller; keeps its own warm start.
#[derive(Debug, Clone)]
pub struct LinearMpcController {
    condensed: CondensedMpc,
    settings: QpSettings,
    previous: Option<QpSolution>,
}

impl LinearMpcController {
    pub fn new(config: &LinearMpcConfig) -> Self {
        Self {
            condensed: CondensedMpc::new(config),
            settings: QpSettings::default(),
            previous: None,
        }
    }
}

impl Controller for LinearMpcController {
    fn step(&mut self, input: &ControlInput<'_>) -> Result<DVector<f64>> {
        let step = step_condensed(
            &self.condensed,
            input.x,
            input.x_ref,
            self.previous.as_ref(),
            &self.settings,
        )?;
        self.previous = Some(step.solution);
        Ok(step.u)
    }
}
