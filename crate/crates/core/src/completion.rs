//! Rate estimation by a single scaled rank-`r` SVD of the zero-filled
//! observations, plus recovery-error diagnostics.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{self, SvdOptions};
use crate::types::{DenseMatrix, RateMatrix, SparseObservations};

/// Floor applied to the estimate so Poisson likelihoods stay finite.
pub const RATE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct RateEstimate {
    /// `(nm / |Ω|) SVD_r(X')`, which targets `e(θ*) M*`.
    pub raw: DenseMatrix,
    /// `max(raw, RATE_FLOOR)`.
    pub clipped: RateMatrix,
    pub sigma: Vec<f64>,
}

impl RateEstimate {
    /// Wraps an estimate computed elsewhere, applying the floor.
    pub fn from_raw(raw: DMatrix<f64>, sigma: Vec<f64>) -> Result<Self> {
        let clipped = raw.map(|v| v.max(RATE_FLOOR));
        Ok(Self {
            raw: DenseMatrix::new(raw)?,
            clipped: RateMatrix::new(clipped)?,
            sigma,
        })
    }
}

pub fn estimate_rates(obs: &SparseObservations, rank: usize) -> Result<RateEstimate> {
    estimate_rates_with(obs, rank, &SvdOptions::default())
}

pub fn estimate_rates_with(
    obs: &SparseObservations,
    rank: usize,
    opts: &SvdOptions,
) -> Result<RateEstimate> {
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let x = obs.zero_filled();
    let svd = linalg::truncated_svd_with(&x, rank, opts)?;
    let scale = (obs.n() * obs.m()) as f64 / obs.len() as f64;
    let raw = svd.reconstruct() * scale;
    let clipped = raw.map(|v| v.max(RATE_FLOOR));
    Ok(RateEstimate {
        raw: DenseMatrix::new(raw)?,
        clipped: RateMatrix::new(clipped)?,
        sigma: svd.sigma.iter().map(|s| s * scale).collect(),
    })
}

/// Exploratory rank choice: keep singular values at least 5% of the largest.
pub fn threshold_rank(obs: &SparseObservations) -> Result<usize> {
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let s = linalg::singular_values(&obs.zero_filled())?;
    Ok(linalg::numerical_rank(&s, 0.05).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryErrors {
    pub frobenius: f64,
    pub max_abs: f64,
}

/// `‖est/scale − truth‖_F` and `‖est/scale − truth‖_max`.
pub fn recovery_errors(est: &DMatrix<f64>, truth: &RateMatrix, scale: f64) -> Result<RecoveryErrors> {
    if est.shape() != truth.as_matrix().shape() {
        return Err(Error::DimensionMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            est.shape(),
            truth.as_matrix().shape()
        )));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!("scale must be positive, got {scale}")));
    }
    let diff = est / scale - truth.as_matrix();
    Ok(RecoveryErrors {
        frobenius: diff.norm(),
        max_abs: linalg::max_abs(&diff),
    })
}
