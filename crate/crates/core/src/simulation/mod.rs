//! Monte Carlo designs, rejection-probability experiments and the
//! parametric regression comparator.

pub mod dgp;
pub mod ols;
pub mod power;

pub use dgp::{gen_dgp, CateForm, DgpConfig, COSINE_PI};
pub use ols::{ols_cluster_comparison, ParametricResult};
pub use power::{
    parse_beta_grid, rejection_probabilities, PowerExperiment, PowerTable, Preset, RejectionRow, Statistic, TestSpec,
    Vary, NOMINAL_LEVELS,
};
