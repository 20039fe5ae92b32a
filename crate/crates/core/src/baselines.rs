//! Comparison methods: soft-impute, Stable-PCP (optionally max-norm capped,
//! i.e. RMC), DRMF, and the rank-targeting regularization tuner.
//!
//! All solvers fill unobserved entries with the current iterate, which makes
//! every update a majorize–minimize step and the objectives non-increasing.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::completion::estimate_rates;
use crate::error::{Error, Result};
use crate::linalg::{self, numerical_rank};
use crate::types::SparseObservations;

pub const DEFAULT_TOL: f64 = 1e-5;
pub const DEFAULT_MAX_ITER: usize = 300;
/// Ratio of the geometric regularization grid.
pub const GRID_RATIO: f64 = 1.3;
/// Relative singular-value cutoff for the numerical rank.
pub const RANK_REL_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub max_iter: usize,
    /// Stop once the relative Frobenius change of the iterate drops below this.
    pub tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// A low-rank plus sparse split of the observations.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub m_hat: DMatrix<f64>,
    /// Zero off the observed set.
    pub a_hat: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub objective: f64,
    /// Objective after every iteration.
    pub trace: Vec<f64>,
    /// Singular values of the final low-rank step.
    pub sigma: Vec<f64>,
}

impl Decomposition {
    pub fn rank(&self) -> usize {
        numerical_rank(&self.sigma, RANK_REL_TOL)
    }

    /// `|X − M̂|` on the observed entries, in observation order.
    pub fn residual_scores(&self, obs: &SparseObservations) -> Vec<f64> {
        obs.entries()
            .iter()
            .map(|e| (e.count as f64 - self.m_hat[(e.row, e.col)]).abs())
            .collect()
    }

    /// `1` where `Â ≠ 0`, in observation order.
    pub fn support(&self, obs: &SparseObservations) -> Vec<f64> {
        obs.entries()
            .iter()
            .map(|e| if self.a_hat[(e.row, e.col)] != 0.0 { 1.0 } else { 0.0 })
            .collect()
    }
}

/// Zero-filled counts and the observed indicator as dense arrays.
struct Observed {
    x: DMatrix<f64>,
    mask: DMatrix<bool>,
}

impl Observed {
    fn new(obs: &SparseObservations) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::EmptyObservations);
        }
        Ok(Self {
            x: obs.zero_filled(),
            mask: obs.observed_indicator(),
        })
    }

    /// `P_Ω(X − A) + P_Ω⊥(M)`.
    fn fill(&self, a: &DMatrix<f64>, m: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(self.x.nrows(), self.x.ncols(), |i, j| {
            if self.mask[(i, j)] {
                self.x[(i, j)] - a[(i, j)]
            } else {
                m[(i, j)]
            }
        })
    }

    /// `‖P_Ω(X − M − A)‖_F²`.
    fn misfit(&self, m: &DMatrix<f64>, a: &DMatrix<f64>) -> f64 {
        let mut s = 0.0;
        for (idx, &seen) in self.mask.iter().enumerate() {
            if seen {
                let r = self.x[idx] - m[idx] - a[idx];
                s += r * r;
            }
        }
        s
    }
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let denom = old.norm().max(1e-12);
    (new - old).norm() / denom
}

fn check_reg(name: &str, v: f64) -> Result<()> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(Error::InvalidParameter(format!("{name} must be finite and non-negative, got {v}")));
    }
    Ok(())
}

/// `min_M ‖P_Ω(X − M)‖_F² + λ‖M‖_*`.
pub fn soft_impute(obs: &SparseObservations, lambda: f64, opts: &SolverOptions) -> Result<Decomposition> {
    soft_impute_from(obs, lambda, None, opts)
}

/// Soft-impute started from `init` (zero when `None`).
pub fn soft_impute_from(
    obs: &SparseObservations,
    lambda: f64,
    init: Option<&DMatrix<f64>>,
    opts: &SolverOptions,
) -> Result<Decomposition> {
    check_reg("lambda", lambda)?;
    let data = Observed::new(obs)?;
    let zero = DMatrix::zeros(obs.n(), obs.m());
    let mut m = init.cloned().unwrap_or_else(|| zero.clone());
    let mut trace = Vec::new();
    let mut sigma = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let shrunk = linalg::soft_threshold(&data.fill(&zero, &m), lambda / 2.0)?;
        let change = relative_change(&shrunk.matrix, &m);
        m = shrunk.matrix;
        trace.push(data.misfit(&m, &zero) + lambda * shrunk.sigma.iter().sum::<f64>());
        sigma = shrunk.sigma;
        if change < opts.tol || m.norm() == 0.0 {
            converged = true;
            break;
        }
    }
    Ok(Decomposition {
        objective: *trace.last().unwrap_or(&f64::NAN),
        m_hat: m,
        a_hat: zero,
        iterations,
        converged,
        trace,
        sigma,
    })
}

fn soft(v: f64, tau: f64) -> f64 {
    v.signum() * (v.abs() - tau).max(0.0)
}

/// `min ‖M‖_* + λ‖A‖_1 + μ‖P_Ω(X − M − A)‖_F²` by alternating minimization,
/// started from `M = SVT(X', 1/(2μ))`, `A = 0`. With `max_cap`, both factors
/// are projected entrywise into `[−cap, cap]` after each update; a projected
/// low-rank step that would raise the objective is rejected.
pub fn stable_pcp(
    obs: &SparseObservations,
    lambda: f64,
    mu: f64,
    max_cap: Option<f64>,
    opts: &SolverOptions,
) -> Result<Decomposition> {
    if !(lambda > 0.0 && lambda.is_finite() && mu > 0.0 && mu.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "stable PCP needs positive lambda and mu, got {lambda}, {mu}"
        )));
    }
    if let Some(cap) = max_cap {
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::InvalidParameter(format!("max cap must be positive, got {cap}")));
        }
    }
    let data = Observed::new(obs)?;
    let clamp = |mat: &mut DMatrix<f64>| {
        if let Some(cap) = max_cap {
            mat.apply(|v| *v = v.clamp(-cap, cap));
        }
    };
    let tau_m = 1.0 / (2.0 * mu);
    let tau_a = lambda / (2.0 * mu);
    let first = linalg::soft_threshold(&data.x, tau_m)?;
    let mut m = first.matrix;
    let mut sigma = first.sigma;
    clamp(&mut m);
    let mut nuclear: f64 = if max_cap.is_some() {
        linalg::singular_values(&m)?.iter().sum()
    } else {
        sigma.iter().sum()
    };
    let mut a = DMatrix::zeros(obs.n(), obs.m());
    let objective = |m: &DMatrix<f64>, a: &DMatrix<f64>, nuclear: f64| {
        nuclear + lambda * a.iter().map(|v| v.abs()).sum::<f64>() + mu * data.misfit(m, a)
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let shrunk = linalg::soft_threshold(&data.fill(&a, &m), tau_m)?;
        let mut m_new = shrunk.matrix;
        let mut nuclear_new: f64 = shrunk.sigma.iter().sum();
        if max_cap.is_some() {
            clamp(&mut m_new);
            nuclear_new = linalg::singular_values(&m_new)?.iter().sum();
            // The clamp is not an exact block minimizer; only accept it when
            // it does not undo the descent.
            if objective(&m_new, &a, nuclear_new) > objective(&m, &a, nuclear) {
                m_new = m.clone();
                nuclear_new = nuclear;
            }
        }
        let mut a_new = DMatrix::from_fn(obs.n(), obs.m(), |i, j| {
            if data.mask[(i, j)] {
                soft(data.x[(i, j)] - m_new[(i, j)], tau_a)
            } else {
                0.0
            }
        });
        clamp(&mut a_new);
        let change = (relative_change(&m_new, &m).powi(2) + relative_change(&a_new, &a).powi(2)).sqrt();
        m = m_new;
        a = a_new;
        nuclear = nuclear_new;
        sigma = shrunk.sigma;
        trace.push(objective(&m, &a, nuclear));
        if change < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(Decomposition {
        objective: *trace.last().unwrap_or(&f64::NAN),
        m_hat: m,
        a_hat: a,
        iterations,
        converged,
        trace,
        sigma,
    })
}

/// `min ‖P_Ω(X − A − M)‖_F` subject to `rank M ≤ r`, `‖A‖_0 ≤ e`, started
/// from the scaled rank-`r` SVD of the zero-filled counts.
pub fn drmf(obs: &SparseObservations, rank: usize, e: usize, opts: &SolverOptions) -> Result<Decomposition> {
    if e > obs.len() {
        return Err(Error::InvalidParameter(format!(
            "outlier budget {e} exceeds {} observed entries",
            obs.len()
        )));
    }
    let data = Observed::new(obs)?;
    let init = estimate_rates(obs, rank)?;
    let mut m = init.raw.into_matrix();
    let mut sigma = init.sigma;
    let mut a = top_residuals(&data, &m, e, obs);
    let mut trace = vec![data.misfit(&m, &a)];
    let mut converged = false;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let svd = linalg::truncated_svd(&data.fill(&a, &m), rank, linalg::DEFAULT_TOL)?;
        let m_new = svd.reconstruct();
        let a_new = top_residuals(&data, &m_new, e, obs);
        let change = (relative_change(&m_new, &m).powi(2) + relative_change(&a_new, &a).powi(2)).sqrt();
        m = m_new;
        a = a_new;
        sigma = svd.sigma;
        let value = data.misfit(&m, &a);
        let stalled = trace.last().is_some_and(|prev| prev - value <= opts.tol * prev.max(1e-12));
        trace.push(value);
        if change < opts.tol || stalled {
            converged = true;
            break;
        }
    }
    Ok(Decomposition {
        objective: data.misfit(&m, &a).sqrt(),
        m_hat: m,
        a_hat: a,
        iterations,
        converged,
        trace: trace.into_iter().map(f64::sqrt).collect(),
        sigma,
    })
}

/// The `e` largest-magnitude residuals `X − M` on the observed set.
fn top_residuals(data: &Observed, m: &DMatrix<f64>, e: usize, obs: &SparseObservations) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(m.nrows(), m.ncols());
    if e == 0 {
        return a;
    }
    let mut residuals: Vec<(f64, usize, usize)> = obs
        .entries()
        .iter()
        .map(|en| (data.x[(en.row, en.col)] - m[(en.row, en.col)], en.row, en.col))
        .collect();
    residuals.sort_by(|p, q| q.0.abs().total_cmp(&p.0.abs()).then((p.1, p.2).cmp(&(q.1, q.2))));
    for &(r, i, j) in residuals.iter().take(e) {
        a[(i, j)] = r;
    }
    a
}

/// Baseline selection by identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineId {
    SoftImpute,
    StablePcp,
    Rmc,
    Drmf,
}

impl BaselineId {
    pub const ALL: [BaselineId; 4] = [
        BaselineId::SoftImpute,
        BaselineId::StablePcp,
        BaselineId::Rmc,
        BaselineId::Drmf,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            BaselineId::SoftImpute => "soft-impute",
            BaselineId::StablePcp => "stable-pcp",
            BaselineId::Rmc => "rmc",
            BaselineId::Drmf => "drmf",
        }
    }
}

impl fmt::Display for BaselineId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BaselineId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BaselineId::ALL
            .into_iter()
            .find(|b| b.as_str() == s)
            .ok_or_else(|| Error::UnknownIdentifier(format!("baseline `{s}`")))
    }
}

/// Settings shared by the regularized baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineParams {
    /// Entrywise threshold `λ/(2μ)` applied to the sparse part; `None` uses
    /// `2·sqrt(mean observed count)`.
    pub sparse_threshold: Option<f64>,
    /// Entrywise cap for RMC; required for `rmc`.
    pub max_cap: Option<f64>,
    /// DRMF outlier budget as a fraction of `|Ω|`.
    pub drmf_fraction: f64,
}

impl Default for BaselineParams {
    fn default() -> Self {
        Self {
            sparse_threshold: None,
            max_cap: None,
            drmf_fraction: 0.05,
        }
    }
}

impl BaselineParams {
    pub fn sparse_threshold_for(&self, obs: &SparseObservations) -> f64 {
        self.sparse_threshold
            .unwrap_or_else(|| 2.0 * obs.mean_count().max(1e-12).sqrt())
    }
}

/// Solves one baseline with its single regularization knob `nu`:
/// soft-impute uses `λ = ν`; Stable-PCP and RMC use `μ = 1/ν` with `λ` set
/// so that the sparse threshold stays fixed. DRMF ignores `nu`.
pub fn solve_baseline(
    id: BaselineId,
    obs: &SparseObservations,
    rank: usize,
    nu: f64,
    params: &BaselineParams,
    opts: &SolverOptions,
) -> Result<Decomposition> {
    match id {
        BaselineId::SoftImpute => soft_impute(obs, nu, opts),
        BaselineId::StablePcp | BaselineId::Rmc => {
            let cap = match id {
                BaselineId::Rmc => Some(params.max_cap.ok_or_else(|| {
                    Error::InvalidParameter("rmc requires a max cap".into())
                })?),
                _ => None,
            };
            if !(nu > 0.0) {
                return Err(Error::InvalidParameter(format!("nu must be positive, got {nu}")));
            }
            let mu = 1.0 / nu;
            let lambda = 2.0 * mu * params.sparse_threshold_for(obs);
            stable_pcp(obs, lambda, mu, cap, opts)
        }
        BaselineId::Drmf => {
            let e = (params.drmf_fraction * obs.len() as f64).round() as usize;
            drmf(obs, rank, e.min(obs.len()), opts)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Tuned {
    pub nu: f64,
    pub rank: usize,
    /// Whether the solution's rank equals the target exactly.
    pub exact: bool,
    pub decomposition: Decomposition,
}

/// The smallest `ν` on the grid `ν_k = 0.01 σ_1(X') · 1.3^k` whose solution
/// has numerical rank at most `target_rank`, found by bisection on `k`
/// (rank is non-increasing in `ν`).
pub fn tune_rank_lambda(
    obs: &SparseObservations,
    target_rank: usize,
    solver: BaselineId,
    params: &BaselineParams,
    opts: &SolverOptions,
) -> Result<Tuned> {
    if target_rank == 0 || target_rank > obs.n().min(obs.m()) {
        return Err(Error::RankOutOfRange {
            rank: target_rank,
            n: obs.n(),
            m: obs.m(),
        });
    }
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    if solver == BaselineId::Drmf {
        let d = solve_baseline(solver, obs, target_rank, 0.0, params, opts)?;
        return Ok(Tuned {
            nu: 0.0,
            rank: target_rank,
            exact: true,
            decomposition: d,
        });
    }
    let s1 = linalg::singular_values(&obs.zero_filled())?[0];
    let nu0 = 0.01 * s1;
    // The filled matrix's top singular value is at most σ_1(X')·nm/|Ω|, so
    // this many steps always reaches a rank-0 solution.
    let scale = (obs.n() * obs.m()) as f64 / obs.len() as f64;
    let k_max = ((400.0 * scale).ln() / GRID_RATIO.ln()).ceil() as i64;
    let solve = |k: i64| -> Result<Decomposition> {
        solve_baseline(solver, obs, target_rank, nu0 * GRID_RATIO.powi(k as i32), params, opts)
    };
    let first = solve(0)?;
    if first.rank() <= target_rank {
        let rank = first.rank();
        return Ok(Tuned {
            nu: nu0,
            rank,
            exact: rank == target_rank,
            decomposition: first,
        });
    }
    // Invariant: rank(lo) > target, rank(hi) ≤ target.
    let (mut lo, mut hi) = (0i64, k_max);
    let mut best = solve(hi)?;
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        let d = solve(mid)?;
        if d.rank() <= target_rank {
            hi = mid;
            best = d;
        } else {
            lo = mid;
        }
    }
    let rank = best.rank();
    Ok(Tuned {
        nu: nu0 * GRID_RATIO.powi(hi as i32),
        rank,
        exact: rank == target_rank,
        decomposition: best,
    })
}
