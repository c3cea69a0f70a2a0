//! Neural solvers for functional optimization problems with free terminal
//! time or state.
//!
//! Small tanh networks represent the state, costate and control; training
//! drives the residuals of the first-order necessary conditions (state and
//! costate dynamics, Hamiltonian stationarity, transversality) to zero. The
//! [`oracles`] module provides classical reference solutions that the trained
//! models are checked against.

pub mod autodiff;
pub mod checks;
pub mod config;
pub mod error;
pub mod experiment;
pub mod geodesic;
pub mod io;
pub mod kalman;
pub mod mintime;
pub mod networks;
pub mod oracles;
pub mod variational;

pub use error::{Error, Result};
