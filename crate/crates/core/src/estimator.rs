//! Generalized-moment (CDF matching) estimate of `θ = (p_A, α)`.
//!
//! For a candidate `θ` the rate estimate is rescaled by `1/e(θ)` and the
//! model-implied fractions of counts `≤ t`, `t = 0..T-1`, are matched to the
//! empirical fractions in squared distance. The minimizer is located on a
//! coarse grid over `Θ` and refined with Nelder–Mead.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{poisson_pmf, poisson_pmf_prefix, AnomalyModel, ModelId};
use crate::optim::{nelder_mead, NelderMeadOptions};
use crate::types::{DetectorConfig, EstimatorMethod, ModelParams, RateMatrix, SparseObservations, ThetaDomain};

/// Entry count above which the model fractions are averaged over a subsample.
pub const SUBSAMPLE_LIMIT: usize = 1_000_000;

/// `e(θ) = p_A g(α) + (1 - p_A)`.
pub fn scale_e(theta: &ModelParams, model: &dyn AnomalyModel) -> f64 {
    theta.p_anom * model.mean_factor(&theta.alpha) + (1.0 - theta.p_anom)
}

/// `g_t(θ, M)`: expected fraction of entries with count at most `t`.
pub fn model_cdf_fraction(
    theta: &ModelParams,
    rates: &RateMatrix,
    t: u64,
    model: &dyn AnomalyModel,
) -> f64 {
    let p = theta.p_anom;
    let total: f64 = rates
        .as_matrix()
        .iter()
        .map(|&lam| {
            p * model.cdf(t, &theta.alpha, lam)
                + (1.0 - p) * crate::models::poisson_cdf_and_tail(t, lam).0
        })
        .sum();
    (total / rates.as_matrix().len() as f64).min(1.0)
}

/// `|{X_ij <= t, (i,j) ∈ Ω}| / |Ω|`.
pub fn empirical_cdf_fraction(obs: &SparseObservations, t: u64) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::EmptyObservations);
    }
    let hits = obs.entries().iter().filter(|e| e.count <= t).count();
    Ok(hits as f64 / obs.len() as f64)
}

/// Output of the moment fit.
#[derive(Debug, Clone)]
pub struct MomentFit {
    pub theta_hat: ModelParams,
    pub objective_value: f64,
    /// Every `(θ, objective)` evaluated, grid first.
    pub trace: Vec<(ModelParams, f64)>,
    /// False when the refinement stopped on its evaluation cap.
    pub converged: bool,
}

impl MomentFit {
    /// `e(θ̂)`.
    pub fn scale(&self, model: &dyn AnomalyModel) -> f64 {
        scale_e(&self.theta_hat, model)
    }
}

/// The moment-matching objective, with the rate vector and empirical
/// fractions precomputed.
pub struct MomentObjective<'a> {
    rates: Vec<f64>,
    empirical: Vec<f64>,
    model: &'a dyn AnomalyModel,
}

impl<'a> MomentObjective<'a> {
    pub fn new(
        obs: &SparseObservations,
        rates: &RateMatrix,
        moments: usize,
        model: &'a dyn AnomalyModel,
        seed: u64,
    ) -> Result<Self> {
        let empirical = (0..moments as u64)
            .map(|t| empirical_cdf_fraction(obs, t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::with_targets(rates, empirical, model, seed))
    }

    /// Objective against arbitrary target fractions.
    pub fn with_targets(
        rates: &RateMatrix,
        targets: Vec<f64>,
        model: &'a dyn AnomalyModel,
        seed: u64,
    ) -> Self {
        let all = rates.as_matrix().as_slice();
        let rates = if all.len() > SUBSAMPLE_LIMIT {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut picked = index::sample(&mut rng, all.len(), SUBSAMPLE_LIMIT).into_vec();
            picked.sort_unstable();
            picked.into_iter().map(|i| all[i]).collect()
        } else {
            all.to_vec()
        };
        Self {
            rates,
            empirical: targets,
            model,
        }
    }

    pub fn moments(&self) -> usize {
        self.empirical.len()
    }

    /// `g_t(θ, M̂/e(θ))` for `t = 0..T-1`.
    pub fn model_fractions(&self, theta: &ModelParams) -> Vec<f64> {
        let t_count = self.empirical.len();
        let e = scale_e(theta, self.model);
        let p = theta.p_anom;
        let mut acc = vec![0.0; t_count];
        let mut pois = vec![0.0; t_count];
        let mut anom = vec![0.0; t_count];
        for &m in &self.rates {
            let lam = m / e;
            poisson_pmf_prefix(lam, &mut pois);
            self.model.pmf_prefix(&theta.alpha, lam, &mut anom);
            let mut cum = 0.0;
            for t in 0..t_count {
                cum += p * anom[t] + (1.0 - p) * pois[t];
                acc[t] += cum;
            }
        }
        let n = self.rates.len() as f64;
        acc.iter().map(|v| (v / n).min(1.0)).collect()
    }

    pub fn value(&self, theta: &ModelParams) -> f64 {
        self.model_fractions(theta)
            .iter()
            .zip(&self.empirical)
            .map(|(g, e)| (g - e).powi(2))
            .sum()
    }
}

fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    if points == 1 || hi == lo {
        return vec![lo];
    }
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

fn grid(domain: &ThetaDomain, points: usize) -> Vec<Vec<f64>> {
    let axes: Vec<Vec<f64>> = domain
        .bounds()
        .iter()
        .map(|b| linspace(b.lo, b.hi, points))
        .collect();
    let mut out = vec![Vec::new()];
    for axis in &axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |v| {
                    let mut p = prefix.clone();
                    p.push(*v);
                    p
                })
            })
            .collect();
    }
    out
}

/// Negative mean log-likelihood of the observed counts under the mixture
/// with rates `M̂/e(θ)`.
pub struct LikelihoodObjective<'a> {
    /// `(count, rate)` per observed entry.
    points: Vec<(u64, f64)>,
    model: &'a dyn AnomalyModel,
}

impl<'a> LikelihoodObjective<'a> {
    pub fn new(obs: &SparseObservations, rates: &RateMatrix, model: &'a dyn AnomalyModel) -> Result<Self> {
        if obs.is_empty() {
            return Err(Error::EmptyObservations);
        }
        let points = obs
            .entries()
            .iter()
            .map(|e| (e.count, rates.get(e.row, e.col)))
            .collect();
        Ok(Self { points, model })
    }

    pub fn value(&self, theta: &ModelParams) -> f64 {
        let e = scale_e(theta, self.model);
        let p = theta.p_anom;
        let total: f64 = self
            .points
            .iter()
            .map(|&(k, m)| {
                let lam = m / e;
                let lik = p * self.model.pmf(k, &theta.alpha, lam) + (1.0 - p) * poisson_pmf(k, lam);
                lik.max(f64::MIN_POSITIVE).ln()
            })
            .sum();
        -total / self.points.len() as f64
    }
}

/// Grid search then Nelder–Mead refinement of the moment objective.
pub fn fit_theta_on(objective: &MomentObjective<'_>, domain: &ThetaDomain, grid_points: usize) -> Result<MomentFit> {
    minimize_on(&|theta| objective.value(theta), domain, grid_points)
}

/// Grid search then Nelder–Mead refinement of any objective over `Θ`.
pub fn minimize_on(
    objective: &(dyn Fn(&ModelParams) -> f64 + Sync),
    domain: &ThetaDomain,
    grid_points: usize,
) -> Result<MomentFit> {
    let bounds = domain.bounds();
    if bounds.iter().any(|b| !(b.lo <= b.hi)) {
        return Err(Error::InvalidParameter("parameter domain is empty".into()));
    }
    let candidates = grid(domain, grid_points);
    let values: Vec<f64> = candidates
        .par_iter()
        .map(|v| objective(&ModelParams::from_vector(v)))
        .collect();
    let mut trace: Vec<(ModelParams, f64)> = candidates
        .iter()
        .zip(&values)
        .map(|(v, f)| (ModelParams::from_vector(v), *f))
        .collect();
    let best = (0..values.len())
        .min_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)))
        .expect("non-empty grid");

    let steps: Vec<f64> = bounds
        .iter()
        .map(|b| b.width() / (grid_points.max(2) - 1) as f64)
        .collect();
    let refined = nelder_mead(
        |x| {
            let theta = ModelParams::from_vector(x);
            let f = objective(&theta);
            trace.push((theta, f));
            f
        },
        &candidates[best],
        &steps,
        &bounds,
        &NelderMeadOptions::default(),
    );
    let (x, f) = if refined.f <= values[best] {
        (refined.x, refined.f)
    } else {
        (candidates[best].clone(), values[best])
    };
    Ok(MomentFit {
        theta_hat: ModelParams::from_vector(&x),
        objective_value: f,
        trace,
        converged: refined.converged,
    })
}

/// `θ̂ = argmin_Θ Σ_t (g_t(θ, M̂/e(θ)) − empirical_t)²`, or the plug-in
/// maximum-likelihood fit when the config asks for it.
pub fn fit_theta(
    obs: &SparseObservations,
    m_hat: &RateMatrix,
    config: &DetectorConfig,
    model: ModelId,
) -> Result<MomentFit> {
    config.validate()?;
    let domain = config.domain();
    if domain.alpha.len() != model.alpha_dim() {
        return Err(Error::DimensionMismatch(format!(
            "domain has {} alpha ranges, model {} needs {}",
            domain.alpha.len(),
            model,
            model.alpha_dim()
        )));
    }
    match config.estimator {
        EstimatorMethod::Moments => {
            let objective = MomentObjective::new(obs, m_hat, config.moments, model.model(), config.seed)?;
            fit_theta_on(&objective, &domain, config.grid_points)
        }
        EstimatorMethod::Likelihood => {
            let objective = LikelihoodObjective::new(obs, m_hat, model.model())?;
            minimize_on(&|theta| objective.value(theta), &domain, config.grid_points)
        }
    }
}
