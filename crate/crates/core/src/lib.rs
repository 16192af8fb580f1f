//! Optimal long-term investment in a market driven by Gaussian noise with memory.
//!
//! Each risky asset's driving noise `Y_j` has stationary increments and a
//! two-parameter memory `(p_j, q_j)`; with `p_j = 0` it is a Brownian motion.
//! The crate covers:
//!
//! - [`model`] and [`kernels`]: parameters, coefficient curves, risk premium,
//!   the memory kernels `k_j`, `l_j`, the variance ratio `f` and the
//!   admissibility threshold `alpha*`.
//! - [`riccati`]: backward scalar Riccati / linear ODE solvers with terminal
//!   condition zero, their steady states and asymptotic diagnostics.
//! - [`strategy`]: finite-horizon and stationary optimal portfolios, the value
//!   function, the growth rate `J(alpha)`, the log moment generating function
//!   `Lambda(alpha)` and the large-deviations rate `I(c)`.
//! - [`simulate`]: seeded path simulation of the memory state, noise and
//!   wealth, Monte Carlo estimators and the Cameron–Martin type formula.
//! - [`estimate`]: lag-covariance statistics of price data and nonlinear
//!   least-squares fitting of `(sigma, p, q)`.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod error;
pub mod estimate;
pub mod fixtures;
pub mod kernels;
pub mod model;
pub mod riccati;
pub mod simulate;
pub mod stats;
pub mod strategy;

pub use error::{Error, Result};
pub use model::{CoefficientCurves, MemoryParams, PowerUtility, ScalarCurve};
