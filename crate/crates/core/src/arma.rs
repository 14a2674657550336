//! Fixed-window ARMA controllers.
//!
//! Controller `i` computes
//!
//! ```text
//!     u_r,k = 0          k < ℓw
//!     u_r,k = φ_k θ      otherwise
//!     φ_k   = I_ℓu ⊗ [u_{k-1}ᵀ … u_{k-ℓw}ᵀ  z_{k-1}ᵀ … z_{k-ℓw}ᵀ]
//! ```
//!
//! where `u_{k-j}` are the controller's own *saturated* past outputs and
//! `z_{k-j} = Z(r_{k-j}, y_{k-j})` are past performance variables.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::plant::{wrap_pi, ControlInput, Controller, SaturationLimits};

/// The performance map `Z(r, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PerformanceMap {
    /// `r - y`.
    TrackingError,
    /// `[-p; wrap(π - φ)]` for `y = [p, φ]`: error to the hanging position.
    PendulumSwingUp,
    /// `[-p; wrap(-φ)]`: error to the upright position.
    PendulumUpright,
}

impl PerformanceMap {
    /// Dimension of `z` given the output dimension.
    pub fn dim(&self, output_dim: usize) -> usize {
        match self {
            PerformanceMap::TrackingError => output_dim,
            PerformanceMap::PendulumSwingUp | PerformanceMap::PendulumUpright => 2,
        }
    }

    pub fn evaluate(&self, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        match self {
            PerformanceMap::TrackingError => r - y,
            PerformanceMap::PendulumSwingUp => DVector::from_column_slice(&[-y[0], wrap_pi(PI - y[1])]),
            PerformanceMap::PendulumUpright => DVector::from_column_slice(&[-y[0], wrap_pi(-y[1])]),
        }
    }
}

pub fn compute_performance(map: PerformanceMap, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    map.evaluate(r, y)
}

/// `ℓθ = ℓw ℓu (ℓy + ℓu)`.
pub fn theta_len(window: usize, input_dim: usize, perf_dim: usize) -> usize {
    window * input_dim * (perf_dim + input_dim)
}

/// `φ = I_ℓu ⊗ [u_{k-1}ᵀ … u_{k-ℓw}ᵀ z_{k-1}ᵀ … z_{k-ℓw}ᵀ]`. Both histories
/// are newest first and must hold exactly `ℓw` entries.
pub fn build_regressor(u_hist: &[DVector<f64>], z_hist: &[DVector<f64>], input_dim: usize, perf_dim: usize) -> DMatrix<f64> {
    assert_eq!(u_hist.len(), z_hist.len(), "histories must have the same length");
    let row = regressor_row(u_hist, z_hist, input_dim, perf_dim);
    kron_identity(&row, input_dim)
}

pub(crate) fn regressor_row(u_hist: &[DVector<f64>], z_hist: &[DVector<f64>], input_dim: usize, perf_dim: usize) -> Vec<f64> {
    let w = u_hist.len();
    let mut row = Vec::with_capacity(w * (input_dim + perf_dim));
    for u in u_hist {
        assert_eq!(u.len(), input_dim, "input history entry has wrong dimension");
        row.extend(u.iter());
    }
    for z in z_hist {
        assert_eq!(z.len(), perf_dim, "performance history entry has wrong dimension");
        row.extend(z.iter());
    }
    row
}

fn kron_identity(row: &[f64], n: usize) -> DMatrix<f64> {
    let l = row.len();
    let mut phi = DMatrix::zeros(n, n * l);
    for a in 0..n {
        for (j, v) in row.iter().enumerate() {
            phi[(a, a * l + j)] = *v;
        }
    }
    phi
}

#[derive(Debug, Clone)]
pub struct ArmaController {
    theta: DVector<f64>,
    window: usize,
    input_dim: usize,
    perf_dim: usize,
    limits: SaturationLimits,
    map: PerformanceMap,
    /// Newest first, `ℓw·ℓu` values.
    u_hist: Vec<f64>,
    /// Newest first, `ℓw·ℓz` values.
    z_hist: Vec<f64>,
    k: usize,
}

impl ArmaController {
    /// `perf_dim` is the dimension of `z`, which is `ℓy` in the examples.
    pub fn new(
        theta: DVector<f64>,
        window: usize,
        input_dim: usize,
        perf_dim: usize,
        limits: SaturationLimits,
        map: PerformanceMap,
    ) -> Result<Self> {
        if window == 0 || input_dim == 0 || perf_dim == 0 {
            return Err(Error::InvalidParameter(format!(
                "ARMA window and dimensions must be positive (ℓw={window}, ℓu={input_dim}, ℓy={perf_dim})"
            )));
        }
        check_dim("ARMA coefficient vector", theta_len(window, input_dim, perf_dim), theta.len())?;
        check_dim("ARMA limits", input_dim, limits.dim())?;
        Ok(Self {
            theta,
            window,
            input_dim,
            perf_dim,
            limits,
            map,
            u_hist: vec![0.0; window * input_dim],
            z_hist: vec![0.0; window * perf_dim],
            k: 0,
        })
    }

    pub fn theta(&self) -> &DVector<f64> {
        &self.theta
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn perf_dim(&self) -> usize {
        self.perf_dim
    }

    pub fn limits(&self) -> &SaturationLimits {
        &self.limits
    }

    pub fn performance_map(&self) -> PerformanceMap {
        self.map
    }

    /// Number of samples processed so far.
    pub fn steps(&self) -> usize {
        self.k
    }

    /// `φ_k θ` from the current histories, ignoring the start-up gate.
    pub fn predict(&self) -> DVector<f64> {
        let l = self.window * (self.input_dim + self.perf_dim);
        let split = self.u_hist.len();
        DVector::from_fn(self.input_dim, |a, _| {
            let th = &self.theta.as_slice()[a * l..(a + 1) * l];
            let (th_u, th_z) = th.split_at(split);
            dot(th_u, &self.u_hist) + dot(th_z, &self.z_hist)
        })
    }

    /// The regressor `φ_k` at the current step.
    pub fn regressor(&self) -> DMatrix<f64> {
        let mut row = self.u_hist.clone();
        row.extend_from_slice(&self.z_hist);
        kron_identity(&row, self.input_dim)
    }

    /// Requested output `u_r,k`; then records `σ(u_r,k)` and `Z(r_k, y_k)`.
    pub fn advance(&mut self, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
        let u_r = if self.k < self.window {
            DVector::zeros(self.input_dim)
        } else {
            self.predict()
        };
        let z = self.map.evaluate(r, y);
        let u = self.limits.saturate(&u_r);
        push_front(&mut self.u_hist, u.as_slice());
        push_front(&mut self.z_hist, z.as_slice());
        self.k += 1;
        u_r
    }

    /// Clears the histories and the step counter.
    pub fn reset(&mut self) {
        self.u_hist.iter_mut().for_each(|v| *v = 0.0);
        self.z_hist.iter_mut().for_each(|v| *v = 0.0);
        self.k = 0;
    }
}

pub fn arma_step(ctrl: &mut ArmaController, r: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    ctrl.advance(r, y)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn push_front(hist: &mut [f64], value: &[f64]) {
    let n = value.len();
    let len = hist.len();
    hist.copy_within(0..len - n, n);
    hist[..n].copy_from_slice(value);
}

impl Controller for ArmaController {
    fn step(&mut self, input: &ControlInput<'_>) -> Result<DVector<f64>> {
        check_dim("ARMA performance variable", self.perf_dim, self.map.dim(input.y.len()))?;
        Ok(self.advance(input.r, input.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn limits() -> SaturationLimits {
        SaturationLimits::symmetric(1, 10.0).unwrap()
    }

    #[test]
    fn regressor_examples() {
        let phi = build_regressor(&[dvector![2.0]], &[dvector![3.0]], 1, 1);
        assert_eq!(phi, DMatrix::from_row_slice(1, 2, &[2.0, 3.0]));
        let phi = build_regressor(&[dvector![1.0], dvector![2.0]], &[dvector![3.0], dvector![4.0]], 1, 1);
        assert_eq!(phi, DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(theta_len(10, 1, 1), 20);
        assert_eq!(theta_len(30, 1, 2), 90);
    }

    #[test]
    fn two_input_regressor_is_block_diagonal() {
        let phi = build_regressor(&[dvector![1.0, 2.0]], &[dvector![3.0]], 2, 1);
        assert_eq!(
            phi,
            DMatrix::from_row_slice(2, 6, &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0])
        );
    }

    #[test]
    fn performance_maps() {
        let r = dvector![2.0];
        assert_eq!(PerformanceMap::TrackingError.evaluate(&r, &dvector![0.5]), dvector![1.5]);
        let z = PerformanceMap::PendulumSwingUp.evaluate(&dvector![0.0, 0.0], &dvector![0.0, PI / 2.0]);
        assert!((z - dvector![0.0, PI / 2.0]).amax() < 1e-15);
        let z = PerformanceMap::PendulumUpright.evaluate(&dvector![0.0, 0.0], &dvector![1.0, 2.0 * PI]);
        assert_eq!(z[0], -1.0);
        assert!(z[1].abs() < 1e-15);
    }

    #[test]
    fn gated_until_window_filled() {
        let theta = DVector::from_element(6, 1.0);
        let mut c = ArmaController::new(theta, 3, 1, 1, limits(), PerformanceMap::TrackingError).unwrap();
        for _ in 0..3 {
            assert_eq!(c.advance(&dvector![2.0], &dvector![0.0]), dvector![0.0]);
        }
        // Histories: u = [0,0,0], z = [2,2,2].
        assert_eq!(c.advance(&dvector![2.0], &dvector![0.0]), dvector![6.0]);
    }

    #[test]
    fn selector_coefficient_reads_own_saturated_output() {
        // θ = e₁ selects u_{k-1}; with window 1 the first real output replays
        // the saturated previous output.
        let theta = dvector![1.0, 0.0];
        let mut c = ArmaController::new(theta, 1, 1, 1, limits(), PerformanceMap::TrackingError).unwrap();
        c.advance(&dvector![0.0], &dvector![0.0]);
        c.u_hist[0] = 5.0;
        assert_eq!(c.advance(&dvector![0.0], &dvector![0.0]), dvector![5.0]);

        let theta = dvector![0.0, 100.0];
        let mut c = ArmaController::new(theta, 1, 1, 1, limits(), PerformanceMap::TrackingError).unwrap();
        c.advance(&dvector![1.0], &dvector![0.0]);
        assert_eq!(c.advance(&dvector![1.0], &dvector![0.0]), dvector![100.0]);
        assert_eq!(c.u_hist, vec![10.0]);
    }

    #[test]
    fn zero_theta_gives_zero() {
        let mut c = ArmaController::new(DVector::zeros(4), 2, 1, 1, limits(), PerformanceMap::TrackingError).unwrap();
        for _ in 0..5 {
            assert_eq!(c.advance(&dvector![2.0], &dvector![0.3]), dvector![0.0]);
        }
    }

    #[test]
    fn rejects_wrong_theta_length() {
        assert!(ArmaController::new(DVector::zeros(5), 2, 1, 1, limits(), PerformanceMap::TrackingError).is_err());
    }

    #[test]
    fn predict_matches_regressor_product() {
        let theta = DVector::from_fn(12, |i, _| (i as f64 * 0.37).sin());
        let lim = SaturationLimits::symmetric(2, 10.0).unwrap();
        let mut c = ArmaController::new(theta.clone(), 2, 2, 1, lim, PerformanceMap::TrackingError).unwrap();
        let r = dvector![1.0];
        for k in 0..4 {
            c.advance(&r, &dvector![k as f64 * 0.2]);
        }
        assert!((c.predict() - c.regressor() * &theta).amax() < 1e-14);
    }
}
