//! Simulation and estimation primitives for quantitative R2* mapping from
//! multi-gradient-recalled-echo (mGRE) data.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] holds the complex multi-echo volumes, their centred unitary
//!   k-space duals and binary masks.
//! * [`phantom`] builds analytic brain-like ground-truth maps.
//! * [`signal`] implements the mono-exponential mGRE forward model with the
//!   intra-voxel dephasing factor `F(t)`, noise and intensity normalisation.
//! * [`motion`] corrupts volumes by replacing blocks of k-space lines with
//!   lines of rigidly moved copies.
//! * [`fit`] is the voxel-wise Levenberg-Marquardt baseline.
//! * [`metrics`] computes relative error, SSIM and table aggregation.

pub mod error;
pub mod fit;
pub mod metrics;
pub mod motion;
pub mod phantom;
pub mod signal;
pub mod tensor;

pub use error::{Error, Result};
pub use num_complex::Complex64;
