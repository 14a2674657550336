//! Distilling MPC controllers into fuzzy blends of ARMA controllers.
//!
//! The pipeline runs a linear or nonlinear MPC in closed loop, fits fixed
//! window ARMA controllers to slices of the logged data, and blends them with
//! a Takagi-Sugeno fuzzy system. Everything is dense linear algebra on
//! [`nalgebra`] types; the only optimizer is the active-set QP in [`qp`].

pub mod arma;
pub mod error;
pub mod experiments;
pub mod fuzzy;
pub mod linear_mpc;
pub mod nmpc;
pub mod plant;
pub mod qp;
pub mod trainer;

pub use error::{Error, Result};
