//! Dense convex quadratic programming.
//!
//! Solves
//!
//! ```text
//!     minimize    ½ uᵀ H u + qᵀ u
//!     subject to  Γ u ≤ ν
//! ```
//!
//! with a primal active-set method. Each iteration solves the equality
//! constrained subproblem on the current working set in range-space form:
//! with `H = L Lᵀ` and `Y = L⁻¹ Γᵀ` computed once, the multipliers of the
//! working set `W` come from the small Schur system `(Y_Wᵀ Y_W) λ = -Y_Wᵀ L⁻¹ g`.
//!
//! A starting point that violates `Γ u ≤ ν` goes through an elastic phase 1
//! first: `min t + ½ρ(‖u - u₀‖² + t²)` s.t. `Γu - t ≤ ν, t ≥ 0`, which is
//! exact (returns `t = 0`) once `ρ` is small enough and the problem is feasible.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{check_dim, Error, Result};

/// Default optimality tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct QpProblem {
    h: DMatrix<f64>,
    q: DVector<f64>,
    gamma: DMatrix<f64>,
    nu: DVector<f64>,
}

impl QpProblem {
    /// Builds a problem, symmetrizing `h`.
    ///
    /// Bounds in `nu` may be `+inf` (the row never binds). `-inf` or NaN
    /// anywhere is rejected.
    pub fn new(
        h: DMatrix<f64>,
        q: DVector<f64>,
        gamma: DMatrix<f64>,
        nu: DVector<f64>,
    ) -> Result<Self> {
        let n = q.len();
        check_dim("QP Hessian rows", n, h.nrows())?;
        check_dim("QP Hessian columns", n, h.ncols())?;
        check_dim("QP constraint columns", n, gamma.ncols())?;
        check_dim("QP constraint bounds", gamma.nrows(), nu.len())?;
        let finite = h.iter().chain(q.iter()).chain(gamma.iter()).all(|v| v.is_finite());
        if !finite || nu.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidParameter(
                "QP data must be finite (bounds may be +inf)".into(),
            ));
        }
        let h = (&h + h.transpose()) * 0.5;
        Ok(Self { h, q, gamma, nu })
    }

    pub fn unconstrained(h: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let n = q.len();
        Self::new(h, q, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.nu.len()
    }

    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }

    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn nu(&self) -> &DVector<f64> {
        &self.nu
    }

    pub fn objective(&self, u: &DVector<f64>) -> f64 {
        0.5 * u.dot(&(&self.h * u)) + self.q.dot(u)
    }

    /// Largest constraint violation `max(Γu - ν)⁺`.
    pub fn max_violation(&self, u: &DVector<f64>) -> f64 {
        let gu = &self.gamma * u;
        gu.iter()
            .zip(self.nu.iter())
            .map(|(a, b)| a - b)
            .fold(0.0, f64::max)
    }

    /// Infinity-norm KKT residual: the worst of stationarity, primal
    /// feasibility, dual feasibility and complementarity.
    pub fn kkt_residual(&self, u: &DVector<f64>, lambda: &DVector<f64>) -> f64 {
        let stationarity = (&self.h * u + &self.q + self.gamma.tr_mul(lambda)).amax();
        let gu = &self.gamma * u;
        let mut primal = 0.0_f64;
        let mut complementarity = 0.0;
        for i in 0..self.nu.len() {
            let slack = gu[i] - self.nu[i];
            primal = primal.max(slack);
            if lambda[i] != 0.0 {
                complementarity += lambda[i] * slack;
            }
        }
        let dual = lambda.iter().fold(0.0_f64, |acc, l| acc.max(-l));
        stationarity
            .max(primal)
            .max(dual)
            .max(complementarity.abs())
    }

    /// Magnitude used to scale the KKT acceptance test.
    fn scale(&self, u: &DVector<f64>) -> f64 {
        let h_norm = self
            .h
            .row_iter()
            .map(|r| r.iter().map(|v| v.abs()).sum::<f64>())
            .fold(0.0, f64::max);
        1.0_f64.max(h_norm * u.amax()).max(self.q.amax())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub u_star: DVector<f64>,
    /// One multiplier per constraint row, zero off the active set.
    pub lambda: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub iterations: usize,
    /// Working set at termination, in the order constraints entered.
    pub active_set: Vec<usize>,
}

impl QpSolution {
    pub fn is_optimal(&self) -> bool {
        self.status == QpStatus::Optimal
    }

    /// Converts a non-optimal status into an error.
    pub fn into_result(self) -> Result<Self> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            status => Err(Error::Qp {
                status,
                kkt_residual: self.kkt_residual,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tol: f64,
    /// Iteration cap; `None` means `50·(n + m)`.
    pub max_iter: Option<usize>,
}

impl Default for QpSettings {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: None,
        }
    }
}

/// Starting information for a solve.
#[derive(Debug, Clone, Default)]
pub struct WarmStart {
    /// Initial iterate. Infeasible points are repaired by phase 1.
    pub point: Option<DVector<f64>>,
    /// Constraints to seed the working set with. Rows that are not active at
    /// the start point, or that are linearly dependent on earlier ones, are skipped.
    pub active_set: Vec<usize>,
}

impl WarmStart {
    pub fn from_solution(solution: &QpSolution) -> Self {
        Self {
            point: Some(solution.u_star.clone()),
            active_set: solution.active_set.clone(),
        }
    }
}

/// Solves `problem` from a cold start.
pub fn solve_qp(problem: &QpProblem, tol: f64, max_iter: usize) -> QpSolution {
    let settings = QpSettings {
        tol,
        max_iter: Some(max_iter),
    };
    solve_qp_with(problem, &settings, None)
}

pub fn solve_qp_with(
    problem: &QpProblem,
    settings: &QpSettings,
    warm: Option<&WarmStart>,
) -> QpSolution {
    let n = problem.dim();
    let m = problem.num_constraints();
    let max_iter = settings.max_iter.unwrap_or(50 * (n + m)).max(1);
    let tol = settings.tol;

    let start = warm
        .and_then(|w| w.point.clone())
        .filter(|p| p.len() == n)
        .unwrap_or_else(|| DVector::zeros(n));
    let hint: Vec<usize> = warm
        .map(|w| w.active_set.iter().copied().filter(|&i| i < m).collect())
        .unwrap_or_default();

    let mut iterations = 0;
    let viol = problem.max_violation(&start);
    let feas_eps = 1e-12 * (1.0 + finite_amax(&problem.nu));

    let (x0, seed) = if viol > feas_eps {
        match phase_one(problem, &start, tol, max_iter, &mut iterations) {
            Some(found) => found,
            None => {
                let lambda = DVector::zeros(m);
                let kkt_residual = problem.kkt_residual(&start, &lambda);
                let status = if iterations >= max_iter {
                    QpStatus::MaxIterations
                } else {
                    QpStatus::Infeasible
                };
                return QpSolution {
                    u_star: start,
                    lambda,
                    status,
                    kkt_residual,
                    iterations,
                    active_set: Vec::new(),
                };
            }
        }
    } else {
        (start, hint)
    };

    let engine = match Engine::new(&problem.h, &problem.q, &problem.gamma, &problem.nu) {
        Some(e) => e,
        None => {
            let lambda = DVector::zeros(m);
            return QpSolution {
                kkt_residual: problem.kkt_residual(&x0, &lambda),
                u_star: x0,
                lambda,
                status: QpStatus::MaxIterations,
                iterations,
                active_set: Vec::new(),
            };
        }
    };
    let outcome = engine.run(x0, &seed, tol, max_iter, &mut iterations);

    let mut lambda = DVector::zeros(m);
    for (&i, &l) in outcome.working.iter().zip(outcome.lambda.iter()) {
        lambda[i] = l;
    }
    let kkt_residual = problem.kkt_residual(&outcome.x, &lambda);
    let status = if outcome.converged && kkt_residual <= tol * problem.scale(&outcome.x) {
        QpStatus::Optimal
    } else {
        QpStatus::MaxIterations
    };
    QpSolution {
        u_star: outcome.x,
        lambda,
        status,
        kkt_residual,
        iterations,
        active_set: outcome.working,
    }
}

/// Elastic phase 1. Returns a feasible point plus the original-problem rows
/// that were active there, or `None` when no feasible point was found.
fn phase_one(
    problem: &QpProblem,
    start: &DVector<f64>,
    tol: f64,
    max_iter: usize,
    iterations: &mut usize,
) -> Option<(DVector<f64>, Vec<usize>)> {
    let n = problem.dim();
    let m = problem.num_constraints();

    let mut gamma = DMatrix::zeros(m + 1, n + 1);
    gamma.view_mut((0, 0), (m, n)).copy_from(&problem.gamma);
    for i in 0..=m {
        gamma[(i, n)] = -1.0;
    }
    let mut nu = DVector::zeros(m + 1);
    nu.rows_mut(0, m).copy_from(&problem.nu);

    let gu = &problem.gamma * start;
    let (worst, t0) = (0..m)
        .map(|i| (i, gu[i] - problem.nu[i]))
        .fold((0, f64::NEG_INFINITY), |acc, c| if c.1 > acc.1 { c } else { acc });

    let mut rho = 1e-2;
    while rho >= 1e-10 && *iterations < max_iter {
        let h = DMatrix::identity(n + 1, n + 1) * rho;
        let mut q = DVector::zeros(n + 1);
        q.rows_mut(0, n).copy_from(&(start * -rho));
        q[n] = 1.0;

        let mut z0 = DVector::zeros(n + 1);
        z0.rows_mut(0, n).copy_from(start);
        z0[n] = t0;

        let engine = Engine::new(&h, &q, &gamma, &nu)?;
        let outcome = engine.run(z0, &[worst], tol, max_iter, iterations);
        let t = outcome.x[n];
        let x = outcome.x.rows(0, n).into_owned();
        if t <= tol * 1e-3 || problem.max_violation(&x) <= 1e-12 * (1.0 + finite_amax(&problem.nu)) {
            let seed = outcome.working.iter().copied().filter(|&i| i < m).collect();
            return Some((x, seed));
        }
        rho *= 1e-2;
    }
    None
}

struct Outcome {
    x: DVector<f64>,
    working: Vec<usize>,
    lambda: DVector<f64>,
    converged: bool,
}

/// Factored data shared by all iterations of one active-set run.
struct Engine<'a> {
    h: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    gamma: &'a DMatrix<f64>,
    nu: &'a DVector<f64>,
    chol: Cholesky<f64, Dyn>,
    /// `LLᵀ`: `H` plus any regularizing shift.
    h_reg: DMatrix<f64>,
    /// `L⁻¹ Γᵀ`, one column per constraint.
    y: DMatrix<f64>,
}

impl<'a> Engine<'a> {
    fn new(
        h: &'a DMatrix<f64>,
        q: &'a DVector<f64>,
        gamma: &'a DMatrix<f64>,
        nu: &'a DVector<f64>,
    ) -> Option<Self> {
        let chol = factor(h)?;
        let y = chol.l_dirty().solve_lower_triangular(&gamma.transpose())?;
        let l = chol.l();
        let h_reg = &l * l.transpose();
        Some(Self {
            h,
            q,
            gamma,
            nu,
            chol,
            h_reg,
            y,
        })
    }

    fn schur(&self, working: &[usize]) -> DMatrix<f64> {
        let k = working.len();
        let mut s = DMatrix::zeros(k, k);
        for a in 0..k {
            for b in 0..=a {
                let v = self.y.column(working[a]).dot(&self.y.column(working[b]));
                s[(a, b)] = v;
                s[(b, a)] = v;
            }
        }
        s
    }

    /// True when row `i` can join `working` without making it dependent.
    fn independent(&self, working: &[usize], i: usize) -> bool {
        let mut trial = working.to_vec();
        trial.push(i);
        let s = self.schur(&trial);
        let diag_max = s.diagonal().amax().max(f64::MIN_POSITIVE);
        match Cholesky::new(s) {
            Some(c) => {
                let l = c.l_dirty();
                (0..trial.len()).all(|j| l[(j, j)] * l[(j, j)] > 1e-12 * diag_max)
            }
            None => false,
        }
    }

    /// Search direction and working-set multipliers at `x`.
    fn eqp(&self, x: &DVector<f64>, working: &[usize]) -> (DVector<f64>, DVector<f64>) {
        let g = self.h * x + self.q;
        // Also restore Γ_W (x + d) = ν_W, which rounding in the ratio test
        // can leave slightly off.
        let r = DVector::from_iterator(
            working.len(),
            working.iter().map(|&i| self.nu[i] - self.gamma.row(i).dot(&x.transpose())),
        );
        let (d, lambda) = self.kkt_solve(&g, &r, working);
        // One refinement step, kept only if it helps; the Schur complement is
        // badly conditioned when the Hessian needed a diagonal shift.
        let (r1, r2) = self.kkt_residual(&g, &r, working, &d, &lambda);
        let (dd, dl) = self.kkt_solve(&r1, &r2, working);
        let (d2, l2) = (&d + dd, &lambda + dl);
        let (s1, s2) = self.kkt_residual(&g, &r, working, &d2, &l2);
        if s1.amax().max(s2.amax()) < r1.amax().max(r2.amax()) {
            (d2, l2)
        } else {
            (d, lambda)
        }
    }

    fn kkt_residual(
        &self,
        g: &DVector<f64>,
        r: &DVector<f64>,
        working: &[usize],
        d: &DVector<f64>,
        lambda: &DVector<f64>,
    ) -> (DVector<f64>, DVector<f64>) {
        let mut r1 = &self.h_reg * d + g;
        for (j, &i) in working.iter().enumerate() {
            r1.axpy(lambda[j], &self.gamma.row(i).transpose(), 1.0);
        }
        let r2 = DVector::from_iterator(
            working.len(),
            working.iter().enumerate().map(|(j, &i)| r[j] - self.gamma.row(i).dot(&d.transpose())),
        );
        (r1, r2)
    }

    /// Solves `[LLᵀ Γ_Wᵀ; Γ_W 0] [d; λ] = [-g; r]`.
    fn kkt_solve(&self, g: &DVector<f64>, r: &DVector<f64>, working: &[usize]) -> (DVector<f64>, DVector<f64>) {
        let l = self.chol.l_dirty();
        let v = l.solve_lower_triangular(g).expect("nonsingular factor");
        let lambda = if working.is_empty() {
            DVector::zeros(0)
        } else {
            let yw = self.y.select_columns(working);
            let s = self.schur(working);
            let rhs = -yw.tr_mul(&v) - r;
            match Cholesky::new(s.clone()) {
                Some(c) => c.solve(&rhs),
                None => s.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(working.len())),
            }
        };
        let mut w = v;
        for (j, &i) in working.iter().enumerate() {
            w.axpy(lambda[j], &self.y.column(i), 1.0);
        }
        let d = -l.tr_solve_lower_triangular(&w).expect("nonsingular factor");
        (d, lambda)
    }

    fn run(
        &self,
        mut x: DVector<f64>,
        seed: &[usize],
        tol: f64,
        max_iter: usize,
        iterations: &mut usize,
    ) -> Outcome {
        let m = self.nu.len();
        let mut working: Vec<usize> = Vec::new();
        {
            let gx = self.gamma * &x;
            let mut seen = vec![false; m];
            for &i in seed {
                if i >= m || seen[i] || !self.nu[i].is_finite() {
                    continue;
                }
                seen[i] = true;
                let slack = self.nu[i] - gx[i];
                if slack.abs() <= 1e-9 * (1.0 + self.nu[i].abs()) && self.independent(&working, i) {
                    working.push(i);
                }
            }
        }

        let mut at_subspace_min = false;
        loop {
            let (d, lambda) = self.eqp(&x, &working);
            let d_eps = 1e3 * f64::EPSILON * (1.0 + x.amax());
            if at_subspace_min || d.amax() <= d_eps {
                // A negligible step still matters for stationarity when H is
                // badly conditioned, so apply it rather than dropping it.
                if !at_subspace_min {
                    x += &d;
                }
                let lambda_scale = 1.0_f64.max(lambda.amax());
                let mut drop: Option<(usize, f64)> = None;
                for (j, &l) in lambda.iter().enumerate() {
                    if l < -tol * lambda_scale {
                        let better = match drop {
                            None => true,
                            Some((jj, ll)) => l < ll || (l == ll && working[j] < working[jj]),
                        };
                        if better {
                            drop = Some((j, l));
                        }
                    }
                }
                match drop {
                    None => {
                        return Outcome {
                            x,
                            working,
                            lambda,
                            converged: true,
                        }
                    }
                    Some((j, _)) => {
                        working.remove(j);
                        at_subspace_min = false;
                    }
                }
            } else {
                let gx = self.gamma * &x;
                let gd = self.gamma * &d;
                let d_norm = d.amax();
                let mut alpha = 1.0;
                let mut blocking = None;
                for i in 0..m {
                    if working.contains(&i) || !self.nu[i].is_finite() {
                        continue;
                    }
                    let row_norm = self.gamma.row(i).amax();
                    if gd[i] <= 1e-14 * row_norm * d_norm {
                        continue;
                    }
                    let slack = (self.nu[i] - gx[i]).max(0.0);
                    let step = slack / gd[i];
                    if step < alpha || (blocking.is_none() && step <= alpha) {
                        alpha = step;
                        blocking = Some(i);
                    }
                }
                x.axpy(alpha, &d, 1.0);
                match blocking {
                    Some(i) => {
                        working.push(i);
                        at_subspace_min = false;
                    }
                    None => at_subspace_min = true,
                }
            }

            *iterations += 1;
            if *iterations >= max_iter {
                let lambda = self.eqp(&x, &working).1;
                return Outcome {
                    x,
                    working,
                    lambda,
                    converged: false,
                };
            }
        }
    }
}

fn finite_amax(v: &DVector<f64>) -> f64 {
    v.iter()
        .filter(|x| x.is_finite())
        .fold(0.0, |a, x| a.max(x.abs()))
}

/// Cholesky factor of `h`, with a small diagonal shift when `h` is only
/// semidefinite.
fn factor(h: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Some(c);
    }
    let n = h.nrows().max(1);
    let trace = h.trace();
    let mut shift = if trace > 0.0 {
        1e-10 * trace / n as f64
    } else {
        1e-10
    };
    for _ in 0..12 {
        let mut shifted = h.clone();
        for i in 0..h.nrows() {
            shifted[(i, i)] += shift;
        }
        if let Some(c) = Cholesky::new(shifted) {
            return Some(c);
        }
        shift *= 10.0;
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    fn solve(p: &QpProblem) -> QpSolution {
        solve_qp_with(p, &QpSettings::default(), None)
    }

    #[test]
    fn unconstrained_minimizer() {
        let p = QpProblem::unconstrained(dmatrix![2.0], dvector![-2.0]).unwrap();
        let s = solve(&p);
        assert!(s.is_optimal());
        assert!((s.u_star[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn upper_bound_cuts_minimizer() {
        let p = QpProblem::new(dmatrix![2.0], dvector![-4.0], dmatrix![1.0], dvector![1.0]).unwrap();
        let s = solve(&p);
        assert!(s.is_optimal());
        assert!((s.u_star[0] - 1.0).abs() < 1e-12);
        assert!((s.lambda[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_active_coupling_row() {
        let p = QpProblem::new(
            DMatrix::identity(2, 2) * 2.0,
            dvector![-2.0, -2.0],
            dmatrix![1.0, 1.0],
            dvector![1.0],
        )
        .unwrap();
        let s = solve(&p);
        assert!(s.is_optimal());
        assert!((s.u_star[0] - 0.5).abs() < 1e-12);
        assert!((s.u_star[1] - 0.5).abs() < 1e-12);
        assert!((s.lambda[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_start_goes_through_phase_one() {
        // u ≥ 3 written as -u ≤ -3; origin is infeasible.
        let p = QpProblem::new(dmatrix![1.0], dvector![0.0], dmatrix![-1.0], dvector![-3.0]).unwrap();
        let s = solve(&p);
        assert!(s.is_optimal(), "{s:?}");
        assert!((s.u_star[0] - 3.0).abs() < 1e-10);
        assert!((s.lambda[0] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn contradictory_bounds_are_infeasible() {
        let p = QpProblem::new(
            dmatrix![1.0],
            dvector![0.0],
            dmatrix![1.0; -1.0],
            dvector![1.0, -2.0],
        )
        .unwrap();
        assert_eq!(solve(&p).status, QpStatus::Infeasible);
    }

    #[test]
    fn semidefinite_hessian_is_regularized() {
        // Linear objective in u₂ bounded by the box.
        let p = QpProblem::new(
            dmatrix![2.0, 0.0; 0.0, 0.0],
            dvector![-2.0, -1.0],
            dmatrix![0.0, 1.0; 0.0, -1.0],
            dvector![4.0, 4.0],
        )
        .unwrap();
        let s = solve(&p);
        assert!((s.u_star[0] - 1.0).abs() < 1e-6);
        assert!((s.u_star[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn infinite_bounds_never_bind() {
        let p = QpProblem::new(
            dmatrix![2.0],
            dvector![-20.0],
            dmatrix![1.0; -1.0],
            dvector![f64::INFINITY, f64::INFINITY],
        )
        .unwrap();
        let s = solve(&p);
        assert!(s.is_optimal());
        assert!((s.u_star[0] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn warm_start_reuses_active_set() {
        let p = QpProblem::new(
            DMatrix::identity(3, 3),
            dvector![-5.0, -5.0, 1.0],
            dmatrix![1.0, 0.0, 0.0; 0.0, 1.0, 0.0],
            dvector![1.0, 1.0],
        )
        .unwrap();
        let cold = solve(&p);
        let warm = solve_qp_with(&p, &QpSettings::default(), Some(&WarmStart::from_solution(&cold)));
        assert!(warm.is_optimal());
        assert!(warm.iterations <= 1, "{}", warm.iterations);
        assert!((&warm.u_star - &cold.u_star).amax() < 1e-12);
    }

    #[test]
    fn rejects_mismatched_dimensions() {
        assert!(QpProblem::new(dmatrix![1.0], dvector![0.0, 0.0], DMatrix::zeros(0, 2), DVector::zeros(0)).is_err());
        assert!(QpProblem::new(dmatrix![1.0], dvector![0.0], dmatrix![1.0], dvector![1.0, 2.0]).is_err());
    }
}
