//! ntklab — a numerical laboratory for the learning dynamics of linearized
//! wide networks.
//!
//! The crate studies how gradient descent distributes learning across the
//! feature directions of a network's tangent-kernel linearization:
//!
//! * [`model`] builds finite-width networks in the NTK parameterization,
//!   computes tangent-feature (NTRF) matrices and linearized predictors.
//! * [`objectives`] provides ridge-regularized cross-entropy, its Legendre
//!   dual, and the singular-value feature basis of the signed feature matrix.
//! * [`dynamics`] evolves the dual variables α under the exact, approximate,
//!   and spectrally decoupled fields, finds fixed points, and checks their
//!   stability.
//! * [`theory`] evaluates the closed-form Lambert-W fixed points, the
//!   perturbative two-feature solution, and the coupling derivative that
//!   quantifies feature starvation.
//! * [`experiments`] contains desk-scale harnesses: two-moon margins,
//!   a colored-digits spurious-correlation task, regularizer ablations.
//! * [`numerics`] supplies the shared scalar/matrix/ODE utilities.
//!
//! The [`acceptance`] module bundles the end-to-end checks that tie the
//! closed forms to the simulated dynamics; `ntklab verify` runs them from
//! the command line and `tests/acceptance.rs` runs them under `cargo test`.

pub mod acceptance;
pub mod cli;
pub mod dynamics;
mod error;
pub mod experiments;
pub mod model;
pub mod numerics;
pub mod objectives;
pub mod theory;

pub use error::{Error, Result};
