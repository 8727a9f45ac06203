//! Continuous-measurement Gaussian dynamics of two Coulomb-coupled levitated
//! oscillators with a modulated trap, under Kalman filtering and LQR feedback.
//!
//! The crate is organized bottom-up:
//!
//! - [`gaussian`]: symplectic spectra, logarithmic negativity, normal modes, squeezing.
//! - [`model`]: drift, diffusion, measurement, feedback and cost matrices.
//! - [`riccati`]: conditional covariance, LQR and excess-noise flows.
//! - [`trajectory`]: stochastic conditional-mean trajectories and ensembles.
//! - [`scan`]: time series, period averages and 2-D parameter scans.
//! - [`experiment`]: config files, figure presets and the CLI runner.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod experiment;
pub mod gaussian;
pub mod model;
pub mod pipeline;
pub mod riccati;
pub mod scan;
pub mod trajectory;

pub use error::{Error, Result};
pub use gaussian::{CovMatrix4, NormalModeBlocks};
pub use model::{ModelConfig, PhysicalParams, Strategy};
pub use riccati::{GainSchedule, Numerics, PeriodicSolution};
