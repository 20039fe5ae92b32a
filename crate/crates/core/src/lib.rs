//! Entrywise anomaly detection for partially observed low-rank count matrices.
//!
//! The pipeline estimates the rate matrix with one truncated SVD, fits the
//! anomaly-model parameters by matching count moments, brackets each entry's
//! non-anomaly posterior in a confidence band and solves a fractional
//! selection program whose false-positive rate is controlled by `γ`.

pub mod baselines;
pub mod cli;
pub mod completion;
pub mod detector;
pub mod error;
pub mod estimator;
pub mod eval;
pub mod experiments;
pub mod io;
pub mod linalg;
pub mod models;
pub mod optim;
pub mod simgen;
pub mod types;

pub use error::{Error, Result};
pub use models::{AnomalyModel, ModelId};
pub use types::*;
