//! Stein variational gradient descent: kernels, targets, Stein discrepancies,
//! the discrete particle update with exact density tracking, its
//! continuous-time limit, and a numerical check harness for the theory.

pub mod cli;
pub mod config;
pub mod continuum;
pub mod discrepancy;
pub mod error;
pub mod kernels;
pub mod output;
pub mod points;
pub mod rng;
pub mod svgd;
pub mod targets;
pub mod verify;

pub use error::{Error, Result};
pub use kernels::{Bandwidth, KernelConfig, KernelFamily, KernelSpec};
pub use points::Points;
pub use targets::{GaussianTarget, MixtureTarget, Target, TargetModel};
