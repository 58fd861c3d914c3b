//! Controlled stochastic evolution equations with Poisson jumps on a
//! Galerkin-truncated Gelfand triple `V ⊂ H ⊂ V*`.
//!
//! The crate is organised bottom-up:
//!
//! - [`noise`]: time grids, finite mark spaces and reproducible ensembles of
//!   Brownian increments and compound-Poisson counts.
//! - [`triple`]: the Galerkin space, operator processes `A(t)`, `B(t)` and
//!   structural checks (coercivity, super-parabolicity, Lipschitz bounds).
//! - [`forward`]: the drift-implicit Euler solver for the state equation, the
//!   parameter-extension Picard solver and the energy / estimate audits.
//! - [`adjoint`]: the backward adjoint equation solved by least-squares
//!   regression, and the Riccati oracle for the linear-quadratic case.
//! - [`control`]: costs, control laws, the Hamiltonian, Gateaux derivatives,
//!   the maximum-principle residual, optimisers and the verification check.
//! - [`cauchy`]: the controlled divergence-form SPDE with quadratic cost as a
//!   ready-made problem plus the end-to-end demonstration pipeline.

pub mod adjoint;
pub mod cauchy;
pub mod control;
mod error;
pub mod forward;
pub mod noise;
mod regression;
pub mod stats;
mod tensor;
pub mod triple;

pub use error::{Error, Result};
pub use tensor::PathTensor;

pub use nalgebra::{DMatrix, DVector};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
