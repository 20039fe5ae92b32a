//! Confidence bands for the non-anomaly posterior, the fractional selection
//! programs and the end-to-end entrywise detector.
//!
//! Both selection programs have a single knapsack-style constraint
//! `Σ t_ij w_ij ≤ B` over `t ∈ [0,1]^Ω`, so the optimum is the greedy fill in
//! ascending cost order with one fractional boundary entry.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselines::{tune_rank_lambda, BaselineId, BaselineParams, SolverOptions};
use crate::completion::{estimate_rates, RateEstimate};
use crate::error::Result;
use crate::estimator::{fit_theta, scale_e, MomentFit};
use crate::models::{poisson_pmf, AnomalyModel};
use crate::types::{
    check_gamma, AnomalyMask, BandMode, CompletionMethod, DetectorConfig, ModelParams, PObsMode, RateMatrix,
    SparseObservations, TheoreticalConstants,
};

/// Band values for one observed entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandEntry {
    pub row: usize,
    pub col: usize,
    pub f_l: f64,
    pub f_point: f64,
    pub f_r: f64,
    /// Plug-in anomaly mass `x̂`.
    pub x_hat: f64,
    /// Plug-in normal mass `ŷ`.
    pub y_hat: f64,
}

/// Per-entry `[f_L, f_R]` bracketing the posterior, in observation order.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceBand {
    pub entries: Vec<BandEntry>,
    pub half_width: f64,
}

impl ConfidenceBand {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn f_l(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.f_l).collect()
    }

    pub fn f_point(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.f_point).collect()
    }

    pub fn f_r(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.f_r).collect()
    }
}

fn unit(x: f64) -> f64 {
    x.clamp(0.0, 1.0)
}

/// Band half-width `C_1 δ` for a configuration.
pub fn band_half_width(
    config: &DetectorConfig,
    consts: &TheoreticalConstants,
    obs: &SparseObservations,
) -> f64 {
    match config.band {
        BandMode::Point => 0.0,
        BandMode::Fixed { half_width } => half_width,
        BandMode::Theoretical => {
            let p_obs = match config.p_obs {
                PObsMode::Known { p_obs } => p_obs,
                PObsMode::Empirical => obs.observed_fraction(),
            };
            consts.half_width(config.rank, obs.m(), p_obs)
        }
    }
}

/// Plug-in band with a given half-width; `M̂` is rescaled by `1/e(θ̂)`.
pub fn confidence_band(
    obs: &SparseObservations,
    m_hat: &RateMatrix,
    theta_hat: &ModelParams,
    half_width: f64,
    model: &dyn AnomalyModel,
) -> ConfidenceBand {
    let e = scale_e(theta_hat, model);
    let p = theta_hat.p_anom;
    let entries = obs
        .entries()
        .iter()
        .map(|entry| {
            let lam = m_hat.get(entry.row, entry.col) / e;
            let x_hat = unit(p * model.pmf(entry.count, &theta_hat.alpha, lam));
            let y_hat = unit((1.0 - p) * poisson_pmf(entry.count, lam));
            let s = x_hat + y_hat;
            let (f_l, f_point, f_r) = if s > 0.0 {
                (
                    unit((y_hat - half_width) / s),
                    unit(y_hat / s),
                    unit((y_hat + half_width) / s),
                )
            } else {
                (0.0, 0.0, 1.0)
            };
            BandEntry {
                row: entry.row,
                col: entry.col,
                f_l,
                f_point,
                f_r,
                x_hat,
                y_hat,
            }
        })
        .collect();
    ConfidenceBand {
        entries,
        half_width,
    }
}

/// Maximizes `Σ t` subject to `Σ t·cost ≤ budget`, `t ∈ [0,1]`.
///
/// Entries are taken in ascending cost, ties by index; zero-cost entries are free.
pub fn greedy_fill(costs: &[f64], budget: f64) -> Vec<f64> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    let mut t = vec![0.0; costs.len()];
    let mut remaining = budget.max(0.0);
    for i in order {
        let w = costs[i];
        if w <= 0.0 {
            t[i] = 1.0;
        } else if w <= remaining {
            t[i] = 1.0;
            remaining -= w;
        } else {
            t[i] = remaining / w;
            break;
        }
    }
    t
}

/// Solves `P^EW`: budget `γ Σ f_L`, costs `f_R`.
pub fn solve_pew(band: &ConfidenceBand, gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let budget = gamma * band.entries.iter().map(|e| e.f_l).sum::<f64>();
    Ok(greedy_fill(&band.f_r(), budget))
}

/// Solves `P*`: budget `γ Σ f*`, costs `f*`.
pub fn solve_oracle(f_star: &[f64], gamma: f64) -> Result<Vec<f64>> {
    check_gamma(gamma)?;
    let budget = gamma * f_star.iter().sum::<f64>();
    Ok(greedy_fill(f_star, budget))
}

/// Independent Bernoulli rounding of selection probabilities.
pub fn sample_mask(
    t: &[f64],
    positions: &[(usize, usize)],
    n: usize,
    m: usize,
    seed: u64,
) -> Result<AnomalyMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked: Vec<(usize, usize)> = t
        .iter()
        .zip(positions)
        .filter_map(|(p, pos)| {
            let u: f64 = rng.random();
            (u < *p).then_some(*pos)
        })
        .collect();
    AnomalyMask::new(n, m, picked)
}

#[derive(Debug, Clone)]
pub struct DetectionSolution {
    pub t: Vec<f64>,
    pub mask: AnomalyMask,
    pub gamma_used: f64,
    /// `γ Σ f_L − Σ t f_R`; non-negative up to rounding.
    pub feasibility_slack: f64,
}

/// Artifacts of every stage of the entrywise detector.
#[derive(Debug, Clone)]
pub struct EwOutput {
    pub rates: RateEstimate,
    pub fit: MomentFit,
    pub band: ConfidenceBand,
    pub solution: DetectionSolution,
}

/// Stages 1–3 computed once; selection can then be re-solved for any `γ`.
#[derive(Debug, Clone)]
pub struct EwPipeline {
    pub rates: RateEstimate,
    pub fit: MomentFit,
    pub band: ConfidenceBand,
    n: usize,
    m: usize,
    seed: u64,
}

impl EwPipeline {
    pub fn prepare(
        obs: &SparseObservations,
        config: &DetectorConfig,
        consts: &TheoreticalConstants,
    ) -> Result<Self> {
        config.validate()?;
        let rates = complete(obs, config)?;
        let fit = fit_theta(obs, &rates.clipped, config, config.model)?;
        let half_width = band_half_width(config, consts, obs);
        let band = confidence_band(obs, &rates.clipped, &fit.theta_hat, half_width, config.model.model());
        Ok(Self {
            rates,
            fit,
            band,
            n: obs.n(),
            m: obs.m(),
            seed: config.seed,
        })
    }

    pub fn selection(&self, gamma: f64) -> Result<Vec<f64>> {
        solve_pew(&self.band, gamma)
    }

    pub fn solve(&self, gamma: f64) -> Result<DetectionSolution> {
        let t = self.selection(gamma)?;
        let positions: Vec<(usize, usize)> = self.band.entries.iter().map(|e| (e.row, e.col)).collect();
        let mask = sample_mask(&t, &positions, self.n, self.m, self.seed)?;
        let budget = gamma * self.band.entries.iter().map(|e| e.f_l).sum::<f64>();
        let used: f64 = t.iter().zip(&self.band.entries).map(|(t, e)| t * e.f_r).sum();
        Ok(DetectionSolution {
            t,
            mask,
            gamma_used: gamma,
            feasibility_slack: budget - used,
        })
    }

    /// `M̂ / e(θ̂)`, the estimate of `M*`.
    pub fn descaled_rates(&self, model: &dyn AnomalyModel) -> nalgebra::DMatrix<f64> {
        self.rates.raw.as_matrix() / self.fit.scale(model)
    }
}

/// Rate estimate targeting `e(θ*) M*` by the configured method.
pub fn complete(obs: &SparseObservations, config: &DetectorConfig) -> Result<RateEstimate> {
    match config.completion {
        CompletionMethod::Svd => estimate_rates(obs, config.rank),
        CompletionMethod::SoftImpute => {
            let tuned = tune_rank_lambda(
                obs,
                config.rank,
                BaselineId::SoftImpute,
                &BaselineParams::default(),
                &SolverOptions::default(),
            )?;
            let d = tuned.decomposition;
            RateEstimate::from_raw(d.m_hat, d.sigma)
        }
    }
}

/// The full entrywise detector at `config.gamma`.
pub fn run_ew(
    obs: &SparseObservations,
    config: &DetectorConfig,
    consts: &TheoreticalConstants,
) -> Result<EwOutput> {
    let pipeline = EwPipeline::prepare(obs, config, consts)?;
    let solution = pipeline.solve(config.gamma)?;
    Ok(EwOutput {
        rates: pipeline.rates,
        fit: pipeline.fit,
        band: pipeline.band,
        solution,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ModelId, PointMassZero, PoissonThinned};

    fn band_from(f_l: &[f64], f_r: &[f64]) -> ConfidenceBand {
        ConfidenceBand {
            entries: f_l
                .iter()
                .zip(f_r)
                .enumerate()
                .map(|(i, (l, r))| BandEntry {
                    row: 0,
                    col: i,
                    f_l: *l,
                    f_point: *l,
                    f_r: *r,
                    x_hat: 0.0,
                    y_hat: 0.0,
                })
                .collect(),
            half_width: 0.0,
        }
    }

    /// Vertex enumeration: every basic solution has at most one fractional entry.
    fn lp_vertex_oracle(costs: &[f64], budget: f64) -> f64 {
        let n = costs.len();
        let mut best = f64::NEG_INFINITY;
        for mask in 0u32..(1 << n) {
            let ones: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| costs[i]).sum();
            if ones <= budget + 1e-12 {
                best = best.max(mask.count_ones() as f64);
            }
            for k in (0..n).filter(|i| mask >> i & 1 == 0) {
                if costs[k] > 0.0 && ones <= budget {
                    let frac = ((budget - ones) / costs[k]).min(1.0);
                    best = best.max(mask.count_ones() as f64 + frac);
                }
            }
        }
        best
    }

    #[test]
    fn pew_three_entry_example() {
        let band = band_from(&[0.05, 0.10, 0.80], &[0.1, 0.2, 0.9]);
        let t = solve_pew(&band, 0.5).unwrap();
        assert_eq!(&t[..2], &[1.0, 1.0]);
        assert!((t[2] - 0.175 / 0.9).abs() < 1e-12);
        let obj: f64 = t.iter().sum();
        assert!((obj - lp_vertex_oracle(&[0.1, 0.2, 0.9], 0.475)).abs() < 1e-12);
    }

    #[test]
    fn pew_degenerate_cases() {
        let band = band_from(&[0.0, 0.0], &[0.0, 0.0]);
        assert_eq!(solve_pew(&band, 0.3).unwrap(), vec![1.0, 1.0]);
        let band = band_from(&[1.0, 1.0], &[0.1, 0.2]);
        assert_eq!(solve_pew(&band, 1.0).unwrap(), vec![1.0, 1.0]);
        assert!(solve_pew(&band, 0.0).is_err());
        assert!(solve_pew(&band, 1.5).is_err());
    }

    #[test]
    fn pew_constraint_tight_unless_all_selected() {
        let f_l = [0.3, 0.5, 0.7, 0.2, 0.9];
        let f_r = [0.4, 0.6, 0.9, 0.3, 1.0];
        let band = band_from(&f_l, &f_r);
        for gamma in [0.05, 0.2, 0.5, 0.9] {
            let t = solve_pew(&band, gamma).unwrap();
            let used: f64 = t.iter().zip(&f_r).map(|(t, w)| t * w).sum();
            let budget = gamma * f_l.iter().sum::<f64>();
            if t.iter().any(|v| *v < 1.0) {
                assert!((used - budget).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_examples() {
        let f = vec![0.4; 10];
        let t = solve_oracle(&f, 0.35).unwrap();
        assert!((t.iter().sum::<f64>() - 3.5).abs() < 1e-12);
        assert_eq!(t.iter().filter(|v| **v == 1.0).count(), 3);
        assert_eq!(solve_oracle(&[0.5], 0.5).unwrap(), vec![0.5]);
    }

    #[test]
    fn oracle_monotone_in_gamma() {
        let f: Vec<f64> = (0..40).map(|i| ((i * 37 % 41) as f64) / 41.0).collect();
        let mut prev = 0.0;
        for k in 1..=20 {
            let s: f64 = solve_oracle(&f, k as f64 / 20.0).unwrap().iter().sum();
            assert!(s >= prev - 1e-12);
            prev = s;
        }
    }

    #[test]
    fn mask_sampling() {
        let pos: Vec<(usize, usize)> = (0..100).map(|i| (i / 10, i % 10)).collect();
        assert_eq!(sample_mask(&[1.0; 100], &pos, 10, 10, 1).unwrap().len(), 100);
        assert!(sample_mask(&[0.0; 100], &pos, 10, 10, 1).unwrap().is_empty());
        let big: Vec<(usize, usize)> = (0..10_000).map(|i| (i / 100, i % 100)).collect();
        let mask = sample_mask(&vec![0.5; 10_000], &big, 100, 100, 7).unwrap();
        assert!((4800..=5200).contains(&mask.len()), "{}", mask.len());
        let again = sample_mask(&vec![0.5; 10_000], &big, 100, 100, 7).unwrap();
        assert_eq!(mask, again);
    }

    #[test]
    fn band_examples() {
        let obs = SparseObservations::from_triples(1, 3, &[(0, 0, 0), (0, 1, 2), (0, 2, 5)]).unwrap();
        let rates = RateMatrix::constant(1, 3, 2.0).unwrap();
        let no_anom = ModelParams::new(0.0, vec![0.3]).unwrap();
        let band = confidence_band(&obs, &rates, &no_anom, 0.0, &PoissonThinned);
        assert!(band.entries.iter().all(|e| e.f_point == 1.0 && e.f_l == 1.0 && e.f_r == 1.0));
        let band = confidence_band(&obs, &rates, &no_anom, 1.0, &PoissonThinned);
        assert!(band.entries.iter().all(|e| e.f_l == 0.0 && e.f_r == 1.0));

        let obs = SparseObservations::from_triples(1, 1, &[(0, 0, 0)]).unwrap();
        let half = ModelParams::new(0.5, vec![]).unwrap();
        // M̂ = e(θ̂) · 1 so that M̂/e = 1.
        let rates = RateMatrix::constant(1, 1, 0.5).unwrap();
        let band = confidence_band(&obs, &rates, &half, 0.0, &PointMassZero);
        assert!((band.entries[0].f_point - 0.2689414213699951).abs() < 1e-15);
    }

    #[test]
    fn band_degenerate_mass() {
        let obs = SparseObservations::from_triples(1, 1, &[(0, 0, 200)]).unwrap();
        let rates = RateMatrix::constant(1, 1, crate::completion::RATE_FLOOR).unwrap();
        let theta = ModelParams::new(0.0, vec![]).unwrap();
        let band = confidence_band(&obs, &rates, &theta, 0.0, &PointMassZero);
        let e = band.entries[0];
        assert_eq!((e.f_l, e.f_point, e.f_r), (0.0, 0.0, 1.0));
    }

    #[test]
    fn point_mode_gamma_one_selects_everything() {
        // δ = 0 makes the constraint Σ t f ≤ Σ f, met by t ≡ 1.
        let x: Vec<(usize, usize, i64)> = (0..36).map(|i| (i / 6, i % 6, (i % 5) as i64)).collect();
        let obs = SparseObservations::from_triples(6, 6, &x).unwrap();
        let cfg = DetectorConfig {
            gamma: 1.0,
            ..DetectorConfig::new(1, ModelId::PoissonThinned)
        };
        let out = run_ew(&obs, &cfg, &TheoreticalConstants::default()).unwrap();
        let total: f64 = out.solution.t.iter().sum();
        assert!((total - 36.0).abs() < 1e-9, "{total}");
        assert!(out.solution.feasibility_slack >= -1e-9);
    }
}
