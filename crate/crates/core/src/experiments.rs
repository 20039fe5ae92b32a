//! Experiment drivers shared by the CLI and the acceptance suite: per-instance
//! method comparison and the ensemble benchmark.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{
    solve_baseline, tune_rank_lambda, BaselineId, BaselineParams, Decomposition, SolverOptions,
};
use crate::completion::{recovery_errors, RecoveryErrors};
use crate::detector::EwPipeline;
use crate::error::{Error, Result};
use crate::eval::{default_gamma_grid, ew_roc, oracle_roc, roc_from_scores, true_posterior, RocCurve, RocPoint, tpr_fpr};
use crate::models::ModelId;
use crate::simgen::{ensemble_member, EnsembleRanges};
use crate::types::{BandMode, CompletionMethod, DetectorConfig, EstimatorMethod, Instance, RateMatrix, TheoreticalConstants};

/// How baseline anomaly scores become an ROC curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ScoreMode {
    /// Threshold `|X − M̂|` from one tuned solve.
    Single,
    /// Re-solve with the sparse threshold scaled by each factor and take the
    /// support of `Â` (DRMF varies its outlier fraction instead).
    MultiSolve { factors: Vec<f64> },
}

/// A method in the comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Oracle,
    Ew,
    SoftImpute,
    StablePcp,
    Rmc,
    Drmf,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Oracle => "oracle",
            Method::Ew => "ew",
            Method::SoftImpute => "soft-impute",
            Method::StablePcp => "stable-pcp",
            Method::Rmc => "rmc",
            Method::Drmf => "drmf",
        }
    }
}

impl From<BaselineId> for Method {
    fn from(b: BaselineId) -> Self {
        match b {
            BaselineId::SoftImpute => Method::SoftImpute,
            BaselineId::StablePcp => Method::StablePcp,
            BaselineId::Rmc => Method::Rmc,
            BaselineId::Drmf => Method::Drmf,
        }
    }
}

/// Settings shared by every method in a comparison.
///
/// The detector defaults to the practical variant used for benchmarking:
/// soft-impute completion, a likelihood fit of `θ`, and a point band. Missing
/// fields in a config file fall back to these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompareConfig {
    /// Working anomaly model of the detector.
    pub working_model: ModelId,
    pub band: BandMode,
    pub moments: Option<usize>,
    pub completion: CompletionMethod,
    pub estimator: EstimatorMethod,
    pub gamma_grid: Vec<f64>,
    pub baselines: Vec<BaselineId>,
    pub baseline_params: BaselineParams,
    pub score_mode: ScoreMode,
    /// RMC's cap as a multiple of `‖M*‖_max`.
    pub rmc_cap_factor: f64,
}

impl Default for CompareConfig {
    fn default() -> Self {
        Self {
            working_model: ModelId::ExpOnset,
            band: BandMode::Point,
            moments: None,
            completion: CompletionMethod::SoftImpute,
            estimator: EstimatorMethod::Likelihood,
            gamma_grid: default_gamma_grid(),
            baselines: BaselineId::ALL.to_vec(),
            baseline_params: BaselineParams::default(),
            score_mode: ScoreMode::Single,
            rmc_cap_factor: 2.0,
        }
    }
}

impl CompareConfig {
    pub fn detector_config(&self, rank: usize, seed: u64) -> DetectorConfig {
        let mut cfg = DetectorConfig::new(rank, self.working_model);
        cfg.band = self.band;
        cfg.seed = seed;
        cfg.completion = self.completion;
        cfg.estimator = self.estimator;
        if let Some(t) = self.moments {
            cfg.moments = t;
        }
        cfg
    }
}

/// One method's result on one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: Method,
    pub auc: f64,
    /// `‖M̂ − M*‖_F`; absent for the oracle, as are the other errors.
    pub frobenius: Option<f64>,
    /// `‖M̂ − M*‖_F / ‖M*‖_F`.
    pub rel_frobenius: Option<f64>,
    pub max_error: Option<f64>,
    #[serde(skip)]
    pub roc: Option<RocCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceReport {
    pub index: usize,
    pub rank: usize,
    pub p_obs: f64,
    pub p_anom: f64,
    pub alpha: Vec<f64>,
    pub mean_level: f64,
    pub p_anom_hat: f64,
    pub alpha_hat: Vec<f64>,
    pub results: Vec<MethodResult>,
}

/// `(‖·‖_F, relative ‖·‖_F, ‖·‖_max)` of `est − truth`.
fn errors_of(est: &nalgebra::DMatrix<f64>, truth: &RateMatrix) -> Result<(f64, f64, f64)> {
    let RecoveryErrors { frobenius, max_abs } = recovery_errors(est, truth, 1.0)?;
    Ok((frobenius, frobenius / truth.as_matrix().norm().max(1e-300), max_abs))
}

/// Baseline ROC under the configured score mode.
pub fn baseline_roc(
    id: BaselineId,
    instance: &Instance,
    rank: usize,
    params: &BaselineParams,
    mode: &ScoreMode,
    f_star: &[f64],
) -> Result<(Decomposition, RocCurve)> {
    let obs = &instance.obs;
    let opts = SolverOptions::default();
    let tuned = tune_rank_lambda(obs, rank, id, params, &opts)?;
    let roc = match mode {
        ScoreMode::Single => roc_from_scores(&tuned.decomposition.residual_scores(obs), f_star)?,
        ScoreMode::MultiSolve { factors } => {
            if id == BaselineId::SoftImpute {
                roc_from_scores(&tuned.decomposition.residual_scores(obs), f_star)?
            } else {
                let points = factors
                    .par_iter()
                    .map(|&factor| {
                        let mut p = *params;
                        let d = if id == BaselineId::Drmf {
                            p.drmf_fraction = (params.drmf_fraction * factor).min(1.0);
                            solve_baseline(id, obs, rank, 0.0, &p, &opts)?
                        } else {
                            p.sparse_threshold = Some(params.sparse_threshold_for(obs) * factor);
                            solve_baseline(id, obs, rank, tuned.nu, &p, &opts)?
                        };
                        let (tpr, fpr) = tpr_fpr(&d.support(obs), f_star)?;
                        Ok(RocPoint { param: factor, fpr, tpr })
                    })
                    .collect::<Result<Vec<_>>>()?;
                RocCurve::from_points(points)?
            }
        }
    };
    Ok((tuned.decomposition, roc))
}

/// Runs the oracle, EW and the configured baselines on one instance, each
/// method scored against the true posterior.
pub fn compare_methods(
    instance: &Instance,
    rank: usize,
    config: &CompareConfig,
    seed: u64,
) -> Result<(Vec<MethodResult>, EwPipeline)> {
    let truth = instance.truth()?;
    let f_star = true_posterior(instance)?;
    let mut results = Vec::new();
    let oracle = oracle_roc(&f_star, &config.gamma_grid)?;
    results.push(MethodResult {
        method: Method::Oracle,
        auc: oracle.auc,
        frobenius: None,
        rel_frobenius: None,
        max_error: None,
        roc: Some(oracle),
    });

    let det = config.detector_config(rank, seed);
    let pipeline = EwPipeline::prepare(&instance.obs, &det, &TheoreticalConstants::default())?;
    let ew = ew_roc(&pipeline, &f_star, &config.gamma_grid)?;
    let (fro, rel, max) = errors_of(&pipeline.descaled_rates(det.model.model()), &truth.rates)?;
    results.push(MethodResult {
        method: Method::Ew,
        auc: ew.auc,
        frobenius: Some(fro),
        rel_frobenius: Some(rel),
        max_error: Some(max),
        roc: Some(ew),
    });

    let cap = config.rmc_cap_factor * truth.rates.max();
    let baseline_results = config
        .baselines
        .par_iter()
        .map(|&id| {
            let params = BaselineParams {
                max_cap: Some(cap),
                ..config.baseline_params
            };
            let (d, roc) = baseline_roc(id, instance, rank, &params, &config.score_mode, &f_star)?;
            let (fro, rel, max) = errors_of(&d.m_hat, &truth.rates)?;
            Ok(MethodResult {
                method: id.into(),
                auc: roc.auc,
                frobenius: Some(fro),
                rel_frobenius: Some(rel),
                max_error: Some(max),
                roc: Some(roc),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    results.extend(baseline_results);
    Ok((results, pipeline))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub count: usize,
    pub master_seed: u64,
    pub ranges: EnsembleRanges,
    pub compare: CompareConfig,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            count: 100,
            master_seed: 0,
            ranges: EnsembleRanges::default(),
            compare: CompareConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub auc_mean: f64,
    pub auc_sd: f64,
    pub frobenius_mean: Option<f64>,
    pub rel_frobenius_mean: Option<f64>,
    pub max_error_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub count: usize,
    pub master_seed: u64,
    pub methods: BTreeMap<String, MethodSummary>,
    pub instances: Vec<InstanceReport>,
}

impl BenchSummary {
    pub fn auc(&self, method: Method) -> Option<f64> {
        self.methods.get(method.as_str()).map(|s| s.auc_mean)
    }

    pub fn frobenius(&self, method: Method) -> Option<f64> {
        self.methods.get(method.as_str()).and_then(|s| s.frobenius_mean)
    }

    pub fn rel_frobenius(&self, method: Method) -> Option<f64> {
        self.methods.get(method.as_str()).and_then(|s| s.rel_frobenius_mean)
    }
}

pub fn bench_instance(config: &BenchConfig, index: usize) -> Result<InstanceReport> {
    let member = ensemble_member(&config.ranges, config.master_seed, index)?;
    let spec = &member.spec;
    let (mut results, pipeline) = compare_methods(&member.instance, spec.rank, &config.compare, spec.seed)?;
    for r in &mut results {
        r.roc = None;
    }
    Ok(InstanceReport {
        index,
        rank: spec.rank,
        p_obs: spec.p_obs,
        p_anom: spec.p_anom,
        alpha: spec.alpha.clone(),
        mean_level: spec.mean_level,
        p_anom_hat: pipeline.fit.theta_hat.p_anom,
        alpha_hat: pipeline.fit.theta_hat.alpha.clone(),
        results,
    })
}

/// Instances run in parallel; aggregation is in index order.
pub fn run_bench(config: &BenchConfig) -> Result<BenchSummary> {
    if config.count == 0 {
        return Err(Error::InvalidParameter("bench needs at least one instance".into()));
    }
    let instances = (0..config.count)
        .into_par_iter()
        .map(|i| bench_instance(config, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(summarize(config, instances))
}

pub fn summarize(config: &BenchConfig, instances: Vec<InstanceReport>) -> BenchSummary {
    let mut per: BTreeMap<Method, Vec<&MethodResult>> = BTreeMap::new();
    for inst in &instances {
        for r in &inst.results {
            per.entry(r.method).or_default().push(r);
        }
    }
    let methods = per
        .into_iter()
        .map(|(method, rs)| {
            let k = rs.len() as f64;
            let mean = rs.iter().map(|r| r.auc).sum::<f64>() / k;
            let var = rs.iter().map(|r| (r.auc - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            let avg = |get: fn(&MethodResult) -> Option<f64>| {
                let vals: Vec<f64> = rs.iter().filter_map(|r| get(r)).collect();
                (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
            };
            (
                method.as_str().to_string(),
                MethodSummary {
                    auc_mean: mean,
                    auc_sd: var.sqrt(),
                    frobenius_mean: avg(|r| r.frobenius),
                    rel_frobenius_mean: avg(|r| r.rel_frobenius),
                    max_error_mean: avg(|r| r.max_error),
                },
            )
        })
        .collect();
    BenchSummary {
        count: instances.len(),
        master_seed: config.master_seed,
        methods,
        instances,
    }
}
