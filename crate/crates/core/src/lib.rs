//! MAP-EM as a discrete-time dynamical system.
//!
//! The EM update `θ̂_{k+1} = argmax_θ Q(θ, θ̂_k)` is treated as a map `F` on
//! parameter space. This crate runs trajectories of that map, evaluates
//! Lyapunov candidates along them, classifies equilibria from sampled
//! evidence, and estimates Q-linear rates. A Gaussian mixture with unknown
//! means and Gaussian priors is provided as the concrete system, along with
//! an experiment harness for prior-strength sweeps.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynsys;
pub mod error;
pub mod experiment;
pub mod gmm;
pub mod lyapunov;
pub mod oracle;

pub use dynsys::{is_fixed_point, run_trajectory, step, EmSystem, ParamPoint, StopReason, StopRule, Trajectory};
pub use error::{Error, Result};
