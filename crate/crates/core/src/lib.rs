//! Desk-scale laboratory for solving linear inverse problems with
//! flow-matching priors.
//!
//! The pieces: a reverse-mode autodiff tape ([`autodiff`]), flow schedules
//! and velocity fields ([`flow`]), differentiable ODE generation
//! ([`generator`]), linear measurement operators ([`forward_models`]), the
//! warm-started shell-constrained solver ([`fmplug`]), comparison solvers
//! ([`baselines`]), and metrics, analytic oracles, and experiment
//! orchestration ([`harness`]).

pub mod autodiff;
pub mod baselines;
pub mod flow;
pub mod fmplug;
pub mod forward_models;
pub mod generator;
pub mod harness;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod textio;

mod error;
pub use error::{Error, Result};
