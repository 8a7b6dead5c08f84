//! Nonholonomic geometry, metric ansatz generation and relativistic diffusion
//! on 2+2 split spacetimes.

pub mod ansatz;
pub mod checks;
pub mod cli;
pub mod error;
pub mod field;
pub mod fokker_planck;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod rng;
pub mod sde;
pub mod stochastic_metrics;

pub use error::{Error, Result};
