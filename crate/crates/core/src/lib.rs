//! Simulation and Bayesian estimation of stochastic day-to-day route choice.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod dynamics;
pub mod error;
pub mod experiments;
pub mod inference;
pub mod io;
pub mod model;
pub mod network;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
