//! OOD-aware EV charging: a receding-horizon baseline, a value-based learned
//! policy, and a meta-policy that projects learned actions onto a ball around
//! the baseline whose radius shrinks with accumulated TD-error.

pub mod analysis;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod model;
pub mod mpc;
pub mod nn;
pub mod ood;
pub mod qp;
pub mod rng;
pub mod session;

pub use error::{Error, Result};
