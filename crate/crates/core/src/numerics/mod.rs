//! Deterministic dense numerical kernels shared by the rest of the crate:
//! symmetric eigendecomposition, adaptive Simpson quadrature, fixed-step
//! RK4 integration, log-log power-law fitting, and bisection root finding.
//! All routines are pure: same inputs give bit-identical outputs.

mod eig;
mod ode;
mod powerlaw;
mod quad;
mod root;

pub use eig::{eig_sym, Eigensystem};
pub use ode::integrate_ode;
pub use powerlaw::{fit_power_law, PowerLawFit};
pub use quad::integrate_quad;
pub use root::find_root;
