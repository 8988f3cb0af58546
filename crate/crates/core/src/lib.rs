//! Training dynamics of networks with an L2 penalty on the weights.
//!
//! The crate has two halves that are meant to be played against each other:
//!
//! * a theory engine ([`flow`]) that evolves the network function of an
//!   infinitely wide homogeneous network under gradient flow with an L2
//!   term, where the tangent kernel decays exponentially and every kernel
//!   mode admits a closed form for MSE loss; and
//! * a finite-width lane ([`network`], [`trainer`], [`harness`]) that
//!   trains real MLPs from scratch and measures the same quantities:
//!   time-to-peak-accuracy scaling, kernel decay, and loss trajectories.
//!
//! [`autoschedule`] packages the two practical procedures built on top of
//! the time-scaling observation: predicting the L2 coefficient from a cheap
//! probe run, and a dynamic L2 schedule driven by the empirical loss.

pub mod autoschedule;
pub mod data;
pub mod error;
pub mod flow;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod numerics;
pub mod parallel;
pub mod trainer;

pub use error::{Error, Result};
