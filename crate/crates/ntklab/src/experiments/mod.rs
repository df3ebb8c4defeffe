//! Desk-scale experiment harnesses.
//!
//! Everything here runs full batch on a single core in minutes: the
//! two-moon margin study, a colored-digits task where a spurious color
//! channel correlates with the label during training and anti-correlates
//! at test time, and a comparison of classical regularizers against
//! spectral decoupling. Data generation is deterministic per seed, and
//! the [`runner`] module persists runs so the same config and seed
//! reproduce the same metrics byte for byte.

pub mod ablation;
pub mod boundary;
pub mod cmnist;
pub mod digits;
pub mod idx;
pub mod runner;
pub mod train;
pub mod twomoon;
