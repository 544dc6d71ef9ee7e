//! Kernel-based tests for heterogeneous treatment effects under clustered
//! interference.
//!
//! The crate estimates conditional average treatment effects `tau(x; pi)`
//! by exposure level `pi` and covariate value `x`, and tests two nulls:
//! that effects do not vary with the exposure (`S1`), and that they do not
//! vary with the covariates (`S2`). Both have asymptotic and bootstrap
//! versions; a Holm step-down combines them into a classification of the
//! source of heterogeneity.
//!
//! Numerical code is generic over [`Real`] (`f32` or `f64`). The aliases
//! below fix `f64`, which is what the CLI and the Monte Carlo harness use.

// `!(x > 0)` is used on purpose so that NaN takes the failure branch.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bootstrap;
pub mod data;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod kernel;
pub mod rng;
pub mod scalar;
pub mod simulation;
pub mod teststat;

pub use data::{
    apply_exposure_mapping, load_clustered_csv, overlap_check, read_clustered_csv, write_clustered_csv, Cluster,
    CsvSchema, Exposure, ExposureMapping, OverlapDiagnostics, Unit,
};
pub use error::{ErrorClass, HteError, Result};
pub use kernel::{bandwidth, BandwidthRule, BandwidthScale, KernelSpec};
pub use scalar::Real;

/// Observed data in double precision.
pub type Sample = data::ClusteredSample<f64>;
/// Per-coordinate bandwidths in double precision.
pub type Bandwidth = kernel::Bandwidth<f64>;
/// Integration grid in double precision.
pub type Grid = teststat::Grid<f64>;
