//! Domain types shared by every stage: observations, rate matrices, masks,
//! model parameters and configuration records.
//!
//! All types validate on construction and are immutable afterwards, so they
//! can be shared read-only between worker threads.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelId;

/// Upper bound on the anomaly probability; keeps `p_A` bounded away from one.
pub const P_ANOM_MAX: f64 = 0.95;

/// One observed count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entry {
    pub row: usize,
    pub col: usize,
    pub count: u64,
}

/// The observed counts `X_Ω` of an `n x m` matrix, sorted by `(row, col)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseObservations {
    n: usize,
    m: usize,
    entries: Vec<Entry>,
}

impl SparseObservations {
    /// Builds from raw triples, rejecting out-of-range indices, duplicate
    /// positions and negative counts.
    pub fn from_triples(n: usize, m: usize, triples: &[(usize, usize, i64)]) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidParameter(format!(
                "matrix dimensions must be positive, got {n}x{m}"
            )));
        }
        let mut entries = Vec::with_capacity(triples.len());
        for &(row, col, count) in triples {
            if row >= n || col >= m {
                return Err(Error::IndexOutOfRange { row, col, n, m });
            }
            if count < 0 {
                return Err(Error::NegativeCount { row, col, count });
            }
            entries.push(Entry {
                row,
                col,
                count: count as u64,
            });
        }
        Self::from_entries(n, m, entries)
    }

    /// Builds from already non-negative entries.
    pub fn from_entries(n: usize, m: usize, mut entries: Vec<Entry>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::InvalidParameter(format!(
                "matrix dimensions must be positive, got {n}x{m}"
            )));
        }
        for e in &entries {
            if e.row >= n || e.col >= m {
                return Err(Error::IndexOutOfRange {
                    row: e.row,
                    col: e.col,
                    n,
                    m,
                });
            }
        }
        entries.sort_unstable_by_key(|e| (e.row, e.col));
        if let Some(w) = entries
            .windows(2)
            .find(|w| (w[0].row, w[0].col) == (w[1].row, w[1].col))
        {
            return Err(Error::DuplicateEntry {
                row: w[0].row,
                col: w[0].col,
            });
        }
        Ok(Self { n, m, entries })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Fraction of observed positions, `|Ω| / (n m)`.
    pub fn observed_fraction(&self) -> f64 {
        self.entries.len() as f64 / (self.n * self.m) as f64
    }

    pub fn positions(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.entries.iter().map(|e| (e.row, e.col))
    }

    /// Dense copy with unobserved entries set to zero (`X'`).
    pub fn zero_filled(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n, self.m);
        for e in &self.entries {
            x[(e.row, e.col)] = e.count as f64;
        }
        x
    }

    /// Dense 0/1 indicator of `Ω`.
    pub fn observed_indicator(&self) -> DMatrix<bool> {
        let mut w = DMatrix::from_element(self.n, self.m, false);
        for e in &self.entries {
            w[(e.row, e.col)] = true;
        }
        w
    }

    pub fn mean_count(&self) -> f64 {
        if self.entries.is_empty() {
            return 0.0;
        }
        self.entries.iter().map(|e| e.count as f64).sum::<f64>() / self.entries.len() as f64
    }
}

/// A general finite real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix(DMatrix<f64>);

impl DenseMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidParameter("empty matrix".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite matrix value {v}")));
        }
        Ok(Self(values))
    }

    pub fn from_row_slice(n: usize, m: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n}x{m} matrix",
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, m, values))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }
}

/// A non-negative rate matrix (`M*`, or a clipped estimate).
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix(DMatrix<f64>);

impl RateMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidParameter("empty matrix".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidParameter(format!(
                "rate matrix values must be finite and non-negative, found {v}"
            )));
        }
        Ok(Self(values))
    }

    pub fn from_row_slice(n: usize, m: usize, values: &[f64]) -> Result<Self> {
        if values.len() != n * m {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {n}x{m} matrix",
                values.len()
            )));
        }
        Self::new(DMatrix::from_row_slice(n, m, values))
    }

    pub fn constant(n: usize, m: usize, value: f64) -> Result<Self> {
        Self::new(DMatrix::from_element(n, m, value))
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.0[(row, col)]
    }

    pub fn max(&self) -> f64 {
        self.0.iter().cloned().fold(0.0, f64::max)
    }

    /// The boundedness constant `L = max entry + 1`.
    pub fn bound(&self) -> f64 {
        self.max() + 1.0
    }

    pub fn mean(&self) -> f64 {
        self.0.iter().sum::<f64>() / self.0.len() as f64
    }

    /// Entrywise multiple, used to move between `M*` and `e(θ) M*`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::new(&self.0 * factor)
    }
}

/// Positions flagged as anomalous (`B = 1`, or a detector's output `A`).
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct AnomalyMask {
    n: usize,
    m: usize,
    positions: BTreeSet<(usize, usize)>,
}

impl AnomalyMask {
    pub fn new(
        n: usize,
        m: usize,
        positions: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (row, col) in positions {
            if row >= n || col >= m {
                return Err(Error::IndexOutOfRange { row, col, n, m });
            }
            set.insert((row, col));
        }
        Ok(Self {
            n,
            m,
            positions: set,
        })
    }

    pub fn empty(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            positions: BTreeSet::new(),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.positions.contains(&(row, col))
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.positions.iter().copied()
    }
}

/// A closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidParameter(format!("empty interval [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lo && x <= self.hi
    }

    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// The search box `Θ = [p_A range] x Γ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaDomain {
    pub p_anom: Interval,
    pub alpha: Vec<Interval>,
}

impl ThetaDomain {
    pub fn new(p_anom: Interval, alpha: Vec<Interval>) -> Result<Self> {
        if p_anom.lo < 0.0 || p_anom.hi > P_ANOM_MAX {
            return Err(Error::InvalidParameter(format!(
                "p_A range [{}, {}] must lie in [0, {P_ANOM_MAX}]",
                p_anom.lo, p_anom.hi
            )));
        }
        Ok(Self { p_anom, alpha })
    }

    /// Dimension of the full parameter vector `(p_A, α)`.
    pub fn dim(&self) -> usize {
        1 + self.alpha.len()
    }

    pub fn contains(&self, theta: &ModelParams) -> bool {
        theta.alpha.len() == self.alpha.len()
            && self.p_anom.contains(theta.p_anom)
            && self
                .alpha
                .iter()
                .zip(&theta.alpha)
                .all(|(iv, a)| iv.contains(*a))
    }

    pub(crate) fn bounds(&self) -> Vec<Interval> {
        std::iter::once(self.p_anom)
            .chain(self.alpha.iter().copied())
            .collect()
    }
}

/// Anomaly-model parameters `θ = (p_A, α)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub p_anom: f64,
    pub alpha: Vec<f64>,
}

impl ModelParams {
    pub fn new(p_anom: f64, alpha: Vec<f64>) -> Result<Self> {
        if !(0.0..=P_ANOM_MAX).contains(&p_anom) {
            return Err(Error::InvalidParameter(format!(
                "p_A = {p_anom} outside [0, {P_ANOM_MAX}]"
            )));
        }
        if alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::InvalidParameter("non-finite alpha".into()));
        }
        Ok(Self { p_anom, alpha })
    }

    pub(crate) fn from_vector(v: &[f64]) -> Self {
        Self {
            p_anom: v[0],
            alpha: v[1..].to_vec(),
        }
    }
}

/// Spectral and regularity constants used by the theoretical band width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalConstants {
    pub kappa: f64,
    pub mu: f64,
    pub l_bound: f64,
    pub k_lip: f64,
    pub c1: f64,
}

impl TheoreticalConstants {
    pub fn new(kappa: f64, mu: f64, l_bound: f64, k_lip: f64, c1: f64) -> Result<Self> {
        let all_pos = [kappa, mu, l_bound, k_lip, c1]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !all_pos || kappa < 1.0 || mu < 1.0 {
            return Err(Error::InvalidParameter(
                "constants must be positive with kappa >= 1 and mu >= 1".into(),
            ));
        }
        Ok(Self {
            kappa,
            mu,
            l_bound,
            k_lip,
            c1,
        })
    }

    /// `δ = (K+L)^3 κ^4 μ r L^2 sqrt(log m / (p_O m))`.
    pub fn delta(&self, rank: usize, m: usize, p_obs: f64) -> f64 {
        let kl = self.k_lip + self.l_bound;
        kl.powi(3)
            * self.kappa.powi(4)
            * self.mu
            * rank as f64
            * self.l_bound.powi(2)
            * ((m as f64).ln() / (p_obs * m as f64)).sqrt()
    }

    /// Half-width `C_1 δ` of the confidence band.
    pub fn half_width(&self, rank: usize, m: usize, p_obs: f64) -> f64 {
        self.c1 * self.delta(rank, m, p_obs)
    }
}

impl Default for TheoreticalConstants {
    fn default() -> Self {
        Self {
            kappa: 1.0,
            mu: 1.0,
            l_bound: 1.0,
            k_lip: 1.0,
            c1: 1.0,
        }
    }
}

/// How the confidence band around the posterior is formed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BandMode {
    /// Zero width: the plug-in posterior on both sides.
    Point,
    /// Width from [`TheoreticalConstants`].
    Theoretical,
    /// A user-supplied half-width.
    Fixed { half_width: f64 },
}

/// Source of `p_O` for the theoretical band width.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PObsMode {
    Known { p_obs: f64 },
    /// `|Ω| / (n m)`.
    Empirical,
}

/// How the rate matrix is estimated before the moment fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompletionMethod {
    /// One scaled rank-`r` SVD of the zero-filled counts.
    #[default]
    Svd,
    /// Soft-impute with its penalty tuned until the solution has rank `r`.
    SoftImpute,
}

/// How `θ` is fitted once the rates are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EstimatorMethod {
    /// Match the first `T` empirical CDF values.
    #[default]
    Moments,
    /// Maximize the plug-in mixture likelihood of the observed counts.
    Likelihood,
}

/// Detector settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    pub rank: usize,
    pub gamma: f64,
    /// Number of CDF moments `T` (thresholds `t = 0..T-1`).
    pub moments: usize,
    pub band: BandMode,
    /// Search box; `None` uses the working model's default.
    pub theta_domain: Option<ThetaDomain>,
    pub model: ModelId,
    pub seed: u64,
    pub p_obs: PObsMode,
    /// Coarse-grid points per parameter dimension.
    pub grid_points: usize,
    #[serde(default)]
    pub completion: CompletionMethod,
    #[serde(default)]
    pub estimator: EstimatorMethod,
}

impl DetectorConfig {
    /// Defaults for a rank and working model: `γ = 0.05`, `T = d + 3`, point band.
    pub fn new(rank: usize, model: ModelId) -> Self {
        Self {
            rank,
            gamma: 0.05,
            moments: model.alpha_dim() + 1 + 3,
            band: BandMode::Point,
            theta_domain: None,
            model,
            seed: 0,
            p_obs: PObsMode::Empirical,
            grid_points: 21,
            completion: CompletionMethod::Svd,
            estimator: EstimatorMethod::Moments,
        }
    }

    pub fn domain(&self) -> ThetaDomain {
        self.theta_domain
            .clone()
            .unwrap_or_else(|| self.model.default_domain())
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidParameter("rank must be at least 1".into()));
        }
        check_gamma(self.gamma)?;
        let domain = self.domain();
        if domain.alpha.len() != self.model.alpha_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model {} has {} alpha parameters, domain has {}",
                self.model,
                self.model.alpha_dim(),
                domain.alpha.len()
            )));
        }
        if self.moments < domain.dim() {
            return Err(Error::InvalidParameter(format!(
                "need at least {} moments for {} parameters, got {}",
                domain.dim(),
                domain.dim(),
                self.moments
            )));
        }
        if self.grid_points < 2 {
            return Err(Error::InvalidParameter("grid needs at least 2 points".into()));
        }
        match self.band {
            BandMode::Fixed { half_width } if !(half_width >= 0.0 && half_width.is_finite()) => {
                return Err(Error::InvalidParameter(format!(
                    "band half-width must be non-negative, got {half_width}"
                )))
            }
            _ => {}
        }
        if let PObsMode::Known { p_obs } = self.p_obs {
            if !(p_obs > 0.0 && p_obs <= 1.0) {
                return Err(Error::InvalidParameter(format!("p_O = {p_obs} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

pub(crate) fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma <= 1.0) {
        return Err(Error::InvalidParameter(format!("gamma = {gamma} outside (0, 1]")));
    }
    Ok(())
}

/// Parameters of one synthetic instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationSpec {
    pub n: usize,
    pub m: usize,
    pub rank: usize,
    pub mean_level: f64,
    pub p_obs: f64,
    pub p_anom: f64,
    pub alpha: Vec<f64>,
    pub model: ModelId,
    pub seed: u64,
}

impl GenerationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::InvalidParameter("dimensions must be positive".into()));
        }
        if self.rank == 0 || self.rank > self.n.min(self.m) {
            return Err(Error::RankOutOfRange {
                rank: self.rank,
                n: self.n,
                m: self.m,
            });
        }
        if !(self.mean_level > 0.0 && self.mean_level.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "mean level must be positive, got {}",
                self.mean_level
            )));
        }
        if !(0.0..=1.0).contains(&self.p_obs) {
            return Err(Error::InvalidParameter(format!("p_O = {} outside [0, 1]", self.p_obs)));
        }
        if !(0.0..1.0).contains(&self.p_anom) {
            return Err(Error::InvalidParameter(format!("p_A = {} outside [0, 1)", self.p_anom)));
        }
        self.model.check_alpha(&self.alpha)
    }
}

/// Ground truth attached to a synthetic instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub rates: RateMatrix,
    pub mask: AnomalyMask,
    pub params: ModelParams,
    /// The model that generated the anomalous counts.
    pub model: ModelId,
}

/// Observations plus optional ground truth, checked for consistency.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub obs: SparseObservations,
    pub truth: Option<Truth>,
}

impl Instance {
    pub fn truth(&self) -> Result<&Truth> {
        self.truth
            .as_ref()
            .ok_or_else(|| Error::InvalidParameter("instance carries no ground truth".into()))
    }
}

/// Checks all invariants of an instance and returns it unchanged.
pub fn validate_instance(obs: SparseObservations, truth: Option<Truth>) -> Result<Instance> {
    // Re-run the observation checks so hand-assembled values are covered too.
    let obs = SparseObservations::from_entries(obs.n, obs.m, obs.entries)?;
    if let Some(t) = &truth {
        let (n, m) = (obs.n(), obs.m());
        if t.rates.nrows() != n || t.rates.ncols() != m {
            return Err(Error::DimensionMismatch(format!(
                "rates are {}x{}, observations are {n}x{m}",
                t.rates.nrows(),
                t.rates.ncols()
            )));
        }
        if t.mask.n() != n || t.mask.m() != m {
            return Err(Error::DimensionMismatch(format!(
                "mask is {}x{}, observations are {n}x{m}",
                t.mask.n(),
                t.mask.m()
            )));
        }
        if t.params.alpha.len() != t.model.alpha_dim() {
            return Err(Error::DimensionMismatch(format!(
                "model {} expects {} alpha values, got {}",
                t.model,
                t.model.alpha_dim(),
                t.params.alpha.len()
            )));
        }
        ModelParams::new(t.params.p_anom, t.params.alpha.clone())?;
    }
    Ok(Instance { obs, truth })
}
