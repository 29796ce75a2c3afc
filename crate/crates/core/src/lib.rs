//! Numerical laboratory for McKean-Vlasov SDEs: interacting particle
//! simulation, spatial and measure Jacobian flows, limsup Lyapunov
//! exponents, and the staircase example whose finite-time exponent never
//! converges.

pub mod cli;
pub mod config;
pub mod counterexample;
mod engine;
pub mod error;
pub mod io;
pub mod linalg;
pub mod lyapunov;
pub mod model;
pub mod noise;
pub mod particle;
pub mod reduce;
pub mod variational;

pub use error::{Error, Result};
