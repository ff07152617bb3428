//! Conley–Zehnder indices of perturbed closed geodesics.
//!
//! Periodic orbits of `H = ½|y|² + V(t, x)` are found on flat tori, the flat
//! Klein bottle and the round 2-sphere. Each orbit gets a trivialization of the
//! pulled-back tangent bundle, non-orientable loops included. The index is
//! then computed twice: as the Morse index of the discretized Jacobi operator
//! and as the crossing count of the linearized flow. The `specflow` module
//! relates the two through spectral flow of twisted Schrödinger operators.

pub mod error;
pub mod framing;
pub mod geometry;
pub mod harness;
pub mod jacobi;
pub mod linalg;
pub mod maslov;
pub mod orbits;
pub mod specflow;
pub mod symplectic;

pub use error::{Error, Result};
