//! Analytic backward pass through compositing, projection, covariance
//! factorization, and activations, plus a finite-difference checker.

mod backward;
mod fd;

pub use backward::{backward, BackgroundGrads, OutputGrads, ParamGrads};
pub use fd::{finite_difference_check, FdConfig, FdGroupReport, FdPrecision, FdReport, QuadraticLoss};

#[cfg(test)]
pub(crate) use fd::param_access as fd_param_access;
#[cfg(test)]
pub(crate) use fd::random_scene;
