//! Numerical laboratory for reaction-diffusion-ODE systems on an interval:
//! n non-diffusing ODE components coupled to one diffusing component with
//! zero-flux boundary conditions.
//!
//! The crate builds regular stationary solutions (ODE components slaved to
//! the diffusing profile), decomposes the spectrum of the linearization into
//! an essential part (pointwise ODE-block eigenvalues) and point eigenvalues
//! (roots of a reduced scalar problem), certifies instability through a
//! scalar fixed-point construction, and corroborates the certificates by
//! time integration.

pub mod error;
pub mod grid;
pub mod linalg;
pub mod model;
pub mod sim;
pub mod spectral;
pub mod stationary;

pub use error::{CoreError, Result};

/// Crate version, embedded in serialized outputs.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
