//! Least-squares fitting of ARMA coefficients from closed-loop logs.
//!
//! Minimizes `‖Φθ - U‖² + θᵀ R θ`, optionally subject to
//! `u_min ≤ Φθ ≤ u_max` row by row.

use nalgebra::{DMatrix, DVector, SymmetricEigen, QR};

use crate::arma::{theta_len, PerformanceMap};
use crate::error::{check_dim, Error, Result};
use crate::plant::SaturationLimits;
use crate::qp::{solve_qp_with, QpProblem, QpSettings, WarmStart};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingDataset {
    /// Logged (already saturated) plant inputs.
    pub u: Vec<DVector<f64>>,
    pub y: Vec<DVector<f64>>,
    pub r: Vec<DVector<f64>>,
    pub map: PerformanceMap,
    pub window: usize,
}

impl TrainingDataset {
    pub fn len(&self) -> usize {
        self.u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingMatrices {
    pub phi: DMatrix<f64>,
    pub u: DVector<f64>,
    pub r_theta: DMatrix<f64>,
    pub window: usize,
    pub input_dim: usize,
    pub perf_dim: usize,
}

/// Stacks regressors for `k = ℓw … ℓtr-1`.
pub fn build_training_matrices(data: &TrainingDataset, r_theta: &DMatrix<f64>) -> Result<TrainingMatrices> {
    let n = data.u.len();
    check_dim("training outputs", n, data.y.len())?;
    check_dim("training references", n, data.r.len())?;
    let w = data.window;
    if w == 0 {
        return Err(Error::InvalidParameter("training window must be positive".into()));
    }
    if n <= w {
        return Err(Error::DatasetTooShort { samples: n, window: w });
    }
    let lu = data.u[0].len();
    let z: Vec<DVector<f64>> = data.r.iter().zip(&data.y).map(|(r, y)| data.map.evaluate(r, y)).collect();
    let lz = z[0].len();
    for u in &data.u {
        check_dim("training input", lu, u.len())?;
    }
    let lt = theta_len(w, lu, lz);
    check_dim("regularization rows", lt, r_theta.nrows())?;
    check_dim("regularization columns", lt, r_theta.ncols())?;

    let rows = n - w;
    let l = lt / lu;
    let mut phi = DMatrix::zeros(rows * lu, lt);
    let mut target = DVector::zeros(rows * lu);
    for (row, k) in (w..n).enumerate() {
        let mut col = 0;
        let mut reg = vec![0.0; l];
        for j in 1..=w {
            reg[col..col + lu].copy_from_slice(data.u[k - j].as_slice());
            col += lu;
        }
        for j in 1..=w {
            reg[col..col + lz].copy_from_slice(z[k - j].as_slice());
            col += lz;
        }
        for a in 0..lu {
            let i = row * lu + a;
            for (c, v) in reg.iter().enumerate() {
                phi[(i, a * l + c)] = *v;
            }
            target[i] = data.u[k][a];
        }
    }
    Ok(TrainingMatrices {
        phi,
        u: target,
        r_theta: r_theta.clone(),
        window: w,
        input_dim: lu,
        perf_dim: lz,
    })
}

/// Fits `θ`; with `limits`, the training-row predictions are constrained.
pub fn train_arma(mats: &TrainingMatrices, limits: Option<&SaturationLimits>) -> Result<DVector<f64>> {
    let phi = &mats.phi;
    check_dim("training targets", phi.nrows(), mats.u.len())?;
    check_dim("regularization size", phi.ncols(), mats.r_theta.nrows())?;
    match limits {
        None => least_squares(phi, &mats.u, &mats.r_theta),
        Some(lim) => constrained(mats, lim),
    }
}

/// Symmetric square root of a PSD matrix, or `None` if it is zero.
fn psd_sqrt(r: &DMatrix<f64>) -> Result<Option<DMatrix<f64>>> {
    if r.amax() == 0.0 {
        return Ok(None);
    }
    let sym = (r + r.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if eig.eigenvalues.min() < -1e-12 * eig.eigenvalues.amax() {
        return Err(Error::InvalidParameter("regularization matrix must be PSD".into()));
    }
    let d = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(Some(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()))
}

/// Orthogonal-factorization solve of the stacked system `[Φ; R^½] θ ≈ [U; 0]`.
fn least_squares(phi: &DMatrix<f64>, u: &DVector<f64>, r: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = phi.ncols();
    let (a, mut b) = match psd_sqrt(r)? {
        None => (phi.clone(), u.clone()),
        Some(s) => {
            let mut a = DMatrix::zeros(phi.nrows() + n, n);
            a.rows_mut(0, phi.nrows()).copy_from(phi);
            a.rows_mut(phi.nrows(), n).copy_from(&s);
            let mut b = DVector::zeros(phi.nrows() + n);
            b.rows_mut(0, u.len()).copy_from(u);
            (a, b)
        }
    };
    if a.nrows() < n {
        return Err(Error::RankDeficient {
            column: a.nrows(),
            columns: n,
        });
    }
    let scale = a.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    let qr = QR::new(a.clone());
    let rmat = qr.r();
    let tol = a.nrows().max(n) as f64 * f64::EPSILON * scale;
    for j in 0..n {
        if rmat[(j, j)].abs() <= tol {
            return Err(Error::RankDeficient { column: j, columns: n });
        }
    }
    qr.q_tr_mul(&mut b);
    let rhs = b.rows(0, n).into_owned();
    let theta = rmat
        .solve_upper_triangular(&rhs)
        .ok_or(Error::RankDeficient { column: 0, columns: n })?;
    Ok(theta)
}

fn constrained(mats: &TrainingMatrices, limits: &SaturationLimits) -> Result<DVector<f64>> {
    let phi = &mats.phi;
    let lu = mats.input_dim;
    check_dim("training limits", lu, limits.dim())?;
    let rows = phi.nrows();
    let h = (phi.tr_mul(phi) + &mats.r_theta) * 2.0;
    let q = phi.tr_mul(&mats.u) * -2.0;
    let mut gamma = DMatrix::zeros(2 * rows, phi.ncols());
    gamma.rows_mut(0, rows).copy_from(phi);
    gamma.rows_mut(rows, rows).copy_from(&(-phi));
    let mut nu = DVector::zeros(2 * rows);
    for i in 0..rows {
        nu[i] = limits.u_max()[i % lu];
        nu[rows + i] = -limits.u_min()[i % lu];
    }
    let qp = QpProblem::new(h, q, gamma, nu)?;
    let zero = DVector::zeros(phi.ncols());
    let warm = if qp.max_violation(&zero) <= 0.0 {
        Some(WarmStart {
            point: Some(zero),
            active_set: Vec::new(),
        })
    } else {
        None
    };
    let sol = solve_qp_with(&qp, &QpSettings::default(), warm.as_ref()).into_result()?;
    Ok(sol.u_star)
}
