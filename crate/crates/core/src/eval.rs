//! TPR/FPR against the true posterior, ROC curves, AUC and oracle regret on
//! the lower-bound family.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{solve_oracle, EwPipeline};
use crate::error::{Error, Result};
use crate::models::{posterior_nonanomaly, ModelId};
use crate::simgen::{gen_lowerbound_instance, LowerBoundSpec, LOWER_BOUND_GAMMA};
use crate::types::{DetectorConfig, Instance, TheoreticalConstants};

/// `(TPR, FPR)` of selection probabilities `t` given the true posterior.
/// A rate whose denominator vanishes is reported as 0.
pub fn tpr_fpr(t: &[f64], f_star: &[f64]) -> Result<(f64, f64)> {
    if t.len() != f_star.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} selection values for {} posterior values",
            t.len(),
            f_star.len()
        )));
    }
    let (mut tp, mut pos, mut fp, mut neg) = (0.0, 0.0, 0.0, 0.0);
    for (t, f) in t.iter().zip(f_star) {
        tp += t * (1.0 - f);
        pos += 1.0 - f;
        fp += t * f;
        neg += f;
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { (a / b).clamp(0.0, 1.0) } else { 0.0 };
    Ok((ratio(tp, pos), ratio(fp, neg)))
}

/// The true non-anomaly posterior of every observed entry, under the
/// instance's generating model and parameters.
pub fn true_posterior(instance: &Instance) -> Result<Vec<f64>> {
    let truth = instance.truth()?;
    let model = truth.model.model();
    Ok(instance
        .obs
        .entries()
        .iter()
        .map(|e| posterior_nonanomaly(e.count, truth.rates.get(e.row, e.col), &truth.params, model).f)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// The swept parameter (`γ`, a score threshold, or a solver multiplier).
    pub param: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Adds the `(0,0)` and `(1,1)` endpoints, orders by `(fpr, tpr)` and
    /// integrates.
    pub fn from_points(mut points: Vec<RocPoint>) -> Result<Self> {
        points.push(RocPoint {
            param: 0.0,
            fpr: 0.0,
            tpr: 0.0,
        });
        points.push(RocPoint {
            param: 1.0,
            fpr: 1.0,
            tpr: 1.0,
        });
        points.sort_by(|a, b| a.fpr.total_cmp(&b.fpr).then(a.tpr.total_cmp(&b.tpr)));
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.fpr, p.tpr)).collect();
        let area = auc(&xy)?;
        Ok(Self { points, auc: area })
    }

    /// Largest TPR among points whose FPR does not exceed `fpr`.
    pub fn tpr_at(&self, fpr: f64) -> f64 {
        self.points
            .iter()
            .filter(|p| p.fpr <= fpr)
            .map(|p| p.tpr)
            .fold(0.0, f64::max)
    }
}

/// Trapezoidal area under `(fpr, tpr)` points sorted by `fpr`.
pub fn auc(points: &[(f64, f64)]) -> Result<f64> {
    if points.windows(2).any(|w| w[1].0 < w[0].0) {
        return Err(Error::Unsorted("ROC points must be sorted by FPR".into()));
    }
    Ok(points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum::<f64>()
        .clamp(0.0, 1.0))
}

/// 33 log-spaced values in `[1e-3, 1]`.
pub fn default_gamma_grid() -> Vec<f64> {
    (0..33).map(|k| 10f64.powf(-3.0 + 3.0 * k as f64 / 32.0)).collect()
}

/// Evaluates `method(param)` → selection probabilities at each grid value.
pub fn sweep_roc<F>(method: F, f_star: &[f64], grid: &[f64]) -> Result<RocCurve>
where
    F: Fn(f64) -> Result<Vec<f64>> + Sync,
{
    if grid.is_empty() {
        return Err(Error::InvalidParameter("ROC grid is empty".into()));
    }
    let points = grid
        .par_iter()
        .map(|&param| {
            let t = method(param)?;
            let (tpr, fpr) = tpr_fpr(&t, f_star)?;
            Ok(RocPoint { param, fpr, tpr })
        })
        .collect::<Result<Vec<_>>>()?;
    RocCurve::from_points(points)
}

/// The ideal policy's curve over a `γ` grid.
pub fn oracle_roc(f_star: &[f64], grid: &[f64]) -> Result<RocCurve> {
    sweep_roc(|g| solve_oracle(f_star, g), f_star, grid)
}

/// The entrywise detector's curve; the band is computed once.
pub fn ew_roc(pipeline: &EwPipeline, f_star: &[f64], grid: &[f64]) -> Result<RocCurve> {
    sweep_roc(|g| pipeline.selection(g), f_star, grid)
}

/// Exact ROC of the rule "flag every entry whose score is at least `s`",
/// swept over all distinct scores (higher score = more anomalous).
pub fn roc_from_scores(scores: &[f64], f_star: &[f64]) -> Result<RocCurve> {
    if scores.len() != f_star.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores for {} posterior values",
            scores.len(),
            f_star.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidParameter("NaN anomaly score".into()));
    }
    let pos: f64 = f_star.iter().map(|f| 1.0 - f).sum();
    let neg: f64 = f_star.iter().sum();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let ratio = |a: f64, b: f64| if b > 0.0 { (a / b).clamp(0.0, 1.0) } else { 0.0 };
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            tp += 1.0 - f_star[order[k]];
            fp += f_star[order[k]];
            k += 1;
        }
        points.push(RocPoint {
            param: s,
            fpr: ratio(fp, neg),
            tpr: ratio(tp, pos),
        });
    }
    RocCurve::from_points(points)
}

/// Mean TPR shortfall of EW against the ideal policy at one size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretPoint {
    pub n: usize,
    pub regret: f64,
    /// Mean EW false-positive rate, to compare against `γ = 1/(2e)`.
    pub ew_fpr: f64,
    pub seeds: usize,
}

/// Regret of one lower-bound draw; EW runs with the `zero` model, rank 1
/// and a point band at `γ = 1/(2e)`.
pub fn lowerbound_regret(spec: &LowerBoundSpec, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lb = gen_lowerbound_instance(spec, &mut rng)?;
    let f_star = true_posterior(&lb.instance)?;
    let oracle = solve_oracle(&f_star, LOWER_BOUND_GAMMA)?;
    let config = DetectorConfig {
        gamma: LOWER_BOUND_GAMMA,
        seed,
        ..DetectorConfig::new(1, ModelId::Zero)
    };
    let pipeline = EwPipeline::prepare(&lb.instance.obs, &config, &TheoreticalConstants::default())?;
    let ew = pipeline.selection(LOWER_BOUND_GAMMA)?;
    let (tpr_oracle, _) = tpr_fpr(&oracle, &f_star)?;
    let (tpr_ew, fpr_ew) = tpr_fpr(&ew, &f_star)?;
    Ok((tpr_oracle - tpr_ew, fpr_ew))
}

/// Per size, the regret averaged over `seeds` (with fresh random bits each).
pub fn regret_curve(ns: &[usize], template: &LowerBoundSpec, seeds: &[u64]) -> Result<Vec<RegretPoint>> {
    if seeds.is_empty() {
        return Err(Error::InvalidParameter("regret curve needs at least one seed".into()));
    }
    ns.iter()
        .map(|&n| {
            let spec = LowerBoundSpec {
                n,
                bits: None,
                ..template.clone()
            };
            spec.validate()?;
            let runs = seeds
                .par_iter()
                .map(|&s| lowerbound_regret(&spec, s ^ (n as u64).rotate_left(32)))
                .collect::<Result<Vec<_>>>()?;
            let k = runs.len() as f64;
            Ok(RegretPoint {
                n,
                regret: runs.iter().map(|r| r.0).sum::<f64>() / k,
                ew_fpr: runs.iter().map(|r| r.1).sum::<f64>() / k,
                seeds: runs.len(),
            })
        })
        .collect()
}
