//! Command-line front end. Every subcommand validates its inputs and finishes
//! its computation before writing anything under `--out`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::baselines::{tune_rank_lambda, BaselineId, BaselineParams, SolverOptions};
use crate::detector::EwPipeline;
use crate::error::{Error, Result};
use crate::eval::{
    default_gamma_grid, ew_roc, oracle_roc, regret_curve, roc_from_scores, true_posterior, RocCurve,
};
use crate::experiments::{run_bench, BenchConfig, Method, ScoreMode};
use crate::io;
use crate::models::ModelId;
use crate::simgen::{generate, LowerBoundSpec, DEFAULT_C_STAR};
use crate::types::{BandMode, CompletionMethod, DetectorConfig, EstimatorMethod, GenerationSpec, TheoreticalConstants};

/// Environment variable read when `--threads` is not given.
pub const THREADS_ENV: &str = "ENTRYWISE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "entrywise", version, about = "Entrywise anomaly detection for low-rank count matrices")]
pub struct Cli {
    /// Master seed for generation, sampling and solvers.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads (results do not depend on this).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic instance directory.
    Generate(GenerateArgs),
    /// Run the entrywise detector on an instance.
    Detect(DetectArgs),
    /// Run one baseline decomposition on an instance.
    Baseline(BaselineArgs),
    /// Write the ROC curve of one method on an instance with ground truth.
    Evaluate(EvaluateArgs),
    /// Compare all methods over a sampled ensemble.
    Bench(BenchArgs),
    /// Oracle regret on the two-point lower-bound family.
    Lowerbound(LowerboundArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// TOML file with a full generation spec; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub mean_level: Option<f64>,
    #[arg(long)]
    pub p_obs: Option<f64>,
    #[arg(long)]
    pub p_anom: Option<f64>,
    /// Anomaly parameters, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub alpha: Option<Vec<f64>>,
    #[arg(long)]
    pub model: Option<ModelId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BandArg {
    Point,
    Theoretical,
    Fixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CompletionArg {
    Svd,
    SoftImpute,
}

impl From<CompletionArg> for CompletionMethod {
    fn from(c: CompletionArg) -> Self {
        match c {
            CompletionArg::Svd => CompletionMethod::Svd,
            CompletionArg::SoftImpute => CompletionMethod::SoftImpute,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EstimatorArg {
    Moments,
    Likelihood,
}

impl From<EstimatorArg> for EstimatorMethod {
    fn from(e: EstimatorArg) -> Self {
        match e {
            EstimatorArg::Moments => EstimatorMethod::Moments,
            EstimatorArg::Likelihood => EstimatorMethod::Likelihood,
        }
    }
}

#[derive(Debug, Args)]
pub struct DetectorArgs {
    /// TOML file with a detector config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub rank: Option<usize>,
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Working anomaly model.
    #[arg(long)]
    pub model: Option<ModelId>,
    #[arg(long, value_enum)]
    pub band: Option<BandArg>,
    /// Half-width for `--band fixed`.
    #[arg(long)]
    pub half_width: Option<f64>,
    /// Number of CDF moments.
    #[arg(long)]
    pub moments: Option<usize>,
    /// Constant `C_1` of the theoretical band.
    #[arg(long)]
    pub c1: Option<f64>,
    /// Rate estimate used before the parameter fit.
    #[arg(long, value_enum)]
    pub completion: Option<CompletionArg>,
    /// Parameter fit.
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Instance directory or manifest.
    #[arg(long)]
    pub instance: PathBuf,
    #[command(flatten)]
    pub detector: DetectorArgs,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// One of soft-impute, stable-pcp, rmc, drmf.
    #[arg(long)]
    pub method: BaselineId,
    /// Target rank of the low-rank part.
    #[arg(long)]
    pub rank: usize,
    /// Entrywise cap for rmc.
    #[arg(long)]
    pub max_cap: Option<f64>,
    /// Sparse-part threshold for stable-pcp and rmc.
    #[arg(long)]
    pub sparse_threshold: Option<f64>,
    /// DRMF outlier budget as a fraction of the observed entries.
    #[arg(long, default_value_t = 0.05)]
    pub drmf_fraction: f64,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub instance: PathBuf,
    /// oracle, ew, soft-impute, stable-pcp, rmc or drmf.
    #[arg(long)]
    pub method: String,
    #[command(flatten)]
    pub detector: DetectorArgs,
    /// RMC cap as a multiple of the true rates' maximum.
    #[arg(long, default_value_t = 2.0)]
    pub rmc_cap_factor: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// TOML file with a bench config; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub count: Option<usize>,
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub m: Option<usize>,
    /// Working anomaly model of the detector.
    #[arg(long)]
    pub working_model: Option<ModelId>,
    /// Generating anomaly model.
    #[arg(long)]
    pub model: Option<ModelId>,
    /// Rate estimate used by the detector.
    #[arg(long, value_enum)]
    pub completion: Option<CompletionArg>,
    /// Parameter fit used by the detector.
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,
    /// Re-solve baselines over a sparse-threshold grid instead of one solve.
    #[arg(long)]
    pub multi_solve: bool,
}

#[derive(Debug, Args)]
pub struct LowerboundArgs {
    /// Even matrix sizes, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [50usize, 100, 200])]
    pub sizes: Vec<usize>,
    /// Number of seeds per size.
    #[arg(long, default_value_t = 20)]
    pub seeds: usize,
    #[arg(long, default_value_t = DEFAULT_C_STAR)]
    pub c_star: f64,
}

fn build_detector_config(args: &DetectorArgs, seed: u64) -> Result<(DetectorConfig, TheoreticalConstants)> {
    let mut cfg = match &args.config {
        Some(path) => io::read_toml::<DetectorConfig>(path)?,
        None => {
            let rank = args
                .rank
                .ok_or_else(|| Error::InvalidParameter("--rank is required without --config".into()))?;
            DetectorConfig::new(rank, args.model.unwrap_or(ModelId::PoissonThinned))
        }
    };
    if let Some(model) = args.model {
        if model != cfg.model {
            cfg.moments = model.alpha_dim() + 4;
            cfg.theta_domain = None;
        }
        cfg.model = model;
    }
    if let Some(r) = args.rank {
        cfg.rank = r;
    }
    if let Some(g) = args.gamma {
        cfg.gamma = g;
    }
    if let Some(t) = args.moments {
        cfg.moments = t;
    }
    if let Some(c) = args.completion {
        cfg.completion = c.into();
    }
    if let Some(e) = args.estimator {
        cfg.estimator = e.into();
    }
    match args.band {
        Some(BandArg::Point) => cfg.band = BandMode::Point,
        Some(BandArg::Theoretical) => cfg.band = BandMode::Theoretical,
        Some(BandArg::Fixed) => {
            let half_width = args
                .half_width
                .ok_or_else(|| Error::InvalidParameter("--band fixed needs --half-width".into()))?;
            cfg.band = BandMode::Fixed { half_width };
        }
        None => {}
    }
    if args.config.is_none() || args.model.is_some() || args.rank.is_some() {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let mut consts = TheoreticalConstants::default();
    if let Some(c1) = args.c1 {
        consts = TheoreticalConstants::new(consts.kappa, consts.mu, consts.l_bound, consts.k_lip, c1)?;
    }
    Ok((cfg, consts))
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|source| Error::Io {
        path: out.display().to_string(),
        source,
    })
}

fn cmd_generate(args: &GenerateArgs, seed: u64, out: &Path) -> Result<()> {
    let mut spec = match &args.config {
        Some(path) => io::read_toml::<GenerationSpec>(path)?,
        None => GenerationSpec {
            n: 100,
            m: 100,
            rank: 3,
            mean_level: 5.0,
            p_obs: 0.8,
            p_anom: 0.04,
            alpha: vec![0.2],
            model: ModelId::ExpOnset,
            seed,
        },
    };
    if args.config.is_none() {
        spec.seed = seed;
    }
    macro_rules! set {
        ($($field:ident),*) => { $(if let Some(v) = args.$field.clone() { spec.$field = v; })* };
    }
    set!(n, m, rank, mean_level, p_obs, p_anom, alpha, model);
    if args.model.is_some() && args.alpha.is_none() && spec.alpha.len() != spec.model.alpha_dim() {
        spec.alpha = vec![0.2; spec.model.alpha_dim()];
    }
    let instance = generate(&spec)?;
    io::write_instance(out, &instance, Some(&spec))?;
    println!(
        "wrote {}x{} instance with {} observed entries to {}",
        spec.n,
        spec.m,
        instance.obs.len(),
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct FitReport {
    p_anom_hat: f64,
    alpha_hat: Vec<f64>,
    objective: f64,
    converged: bool,
    gamma: f64,
    selected: usize,
    expected_selected: f64,
    feasibility_slack: f64,
    half_width: f64,
    config: DetectorConfig,
}

fn cmd_detect(args: &DetectArgs, seed: u64, out: &Path) -> Result<()> {
    let (cfg, consts) = build_detector_config(&args.detector, seed)?;
    let instance = io::read_instance(&args.instance)?;
    let pipeline = EwPipeline::prepare(&instance.obs, &cfg, &consts)?;
    let sol = pipeline.solve(cfg.gamma)?;
    let report = FitReport {
        p_anom_hat: pipeline.fit.theta_hat.p_anom,
        alpha_hat: pipeline.fit.theta_hat.alpha.clone(),
        objective: pipeline.fit.objective_value,
        converged: pipeline.fit.converged,
        gamma: cfg.gamma,
        selected: sol.mask.len(),
        expected_selected: sol.t.iter().sum(),
        feasibility_slack: sol.feasibility_slack,
        half_width: pipeline.band.half_width,
        config: cfg.clone(),
    };
    prepare_out(out)?;
    io::write_detection(&out.join("detection.csv"), &pipeline.band, &sol.t, &sol.mask)?;
    io::write_json(&out.join("detection.json"), &report)?;
    println!(
        "p_A_hat={} alpha_hat={:?} selected={} of {}",
        report.p_anom_hat,
        report.alpha_hat,
        report.selected,
        instance.obs.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct BaselineReport {
    method: String,
    nu: f64,
    rank: usize,
    exact_rank: bool,
    iterations: usize,
    converged: bool,
    objective: f64,
}

fn cmd_baseline(args: &BaselineArgs, out: &Path) -> Result<()> {
    let instance = io::read_instance(&args.instance)?;
    let params = BaselineParams {
        sparse_threshold: args.sparse_threshold,
        max_cap: args.max_cap,
        drmf_fraction: args.drmf_fraction,
    };
    if args.method == BaselineId::Rmc && args.max_cap.is_none() {
        return Err(Error::InvalidParameter("rmc needs --max-cap".into()));
    }
    let tuned = tune_rank_lambda(&instance.obs, args.rank, args.method, &params, &SolverOptions::default())?;
    let d = &tuned.decomposition;
    let scores = d.residual_scores(&instance.obs);
    let name = args.method.as_str();
    prepare_out(out)?;
    io::write_dense(&out.join(format!("{name}_lowrank.csv")), &d.m_hat)?;
    io::write_dense(&out.join(format!("{name}_sparse.csv")), &d.a_hat)?;
    io::write_scores(&out.join(format!("{name}_scores.csv")), &instance.obs, &scores)?;
    io::write_json(
        &out.join(format!("{name}.json")),
        &BaselineReport {
            method: name.into(),
            nu: tuned.nu,
            rank: tuned.rank,
            exact_rank: tuned.exact,
            iterations: d.iterations,
            converged: d.converged,
            objective: d.objective,
        },
    )?;
    println!("{name}: rank {} after {} iterations", tuned.rank, d.iterations);
    Ok(())
}

fn parse_method(s: &str) -> Result<Method> {
    match s {
        "oracle" => Ok(Method::Oracle),
        "ew" => Ok(Method::Ew),
        other => Ok(other.parse::<BaselineId>()?.into()),
    }
}

fn cmd_evaluate(args: &EvaluateArgs, seed: u64, out: &Path) -> Result<()> {
    let method = parse_method(&args.method)?;
    let instance = io::read_instance(&args.instance)?;
    let truth = instance.truth()?;
    let f_star = true_posterior(&instance)?;
    let grid = default_gamma_grid();
    let roc: RocCurve = match method {
        Method::Oracle => oracle_roc(&f_star, &grid)?,
        Method::Ew => {
            let (cfg, consts) = build_detector_config(&args.detector, seed)?;
            let pipeline = EwPipeline::prepare(&instance.obs, &cfg, &consts)?;
            ew_roc(&pipeline, &f_star, &grid)?
        }
        _ => {
            let id = args.method.parse::<BaselineId>()?;
            let rank = args
                .detector
                .rank
                .ok_or_else(|| Error::InvalidParameter("--rank is required for baselines".into()))?;
            let params = BaselineParams {
                max_cap: Some(args.rmc_cap_factor * truth.rates.max()),
                ..BaselineParams::default()
            };
            let tuned = tune_rank_lambda(&instance.obs, rank, id, &params, &SolverOptions::default())?;
            roc_from_scores(&tuned.decomposition.residual_scores(&instance.obs), &f_star)?
        }
    };
    prepare_out(out)?;
    let name = method.as_str();
    io::write_roc(&out.join(format!("roc_{name}.csv")), &roc)?;
    io::write_json(
        &out.join(format!("roc_{name}.json")),
        &serde_json::json!({ "method": name, "auc": roc.auc, "points": roc.points.len() }),
    )?;
    println!("{name}: AUC {:.4}", roc.auc);
    Ok(())
}

fn cmd_bench(args: &BenchArgs, seed: u64, out: &Path) -> Result<()> {
    let mut cfg = match &args.config {
        Some(path) => io::read_toml::<BenchConfig>(path)?,
        None => BenchConfig::default(),
    };
    if args.config.is_none() {
        cfg.master_seed = seed;
    }
    if let Some(c) = args.count {
        cfg.count = c;
    }
    if let Some(n) = args.n {
        cfg.ranges.n = n;
    }
    if let Some(m) = args.m {
        cfg.ranges.m = m;
    }
    if let Some(model) = args.model {
        cfg.ranges.model = model;
    }
    if let Some(w) = args.working_model {
        cfg.compare.working_model = w;
    }
    if let Some(c) = args.completion {
        cfg.compare.completion = c.into();
    }
    if let Some(e) = args.estimator {
        cfg.compare.estimator = e.into();
    }
    if args.multi_solve {
        cfg.compare.score_mode = ScoreMode::MultiSolve {
            factors: (0..12).map(|k| 0.25 * 1.5f64.powi(k)).collect(),
        };
    }
    let summary = run_bench(&cfg)?;
    prepare_out(out)?;
    io::write_json(&out.join("bench.json"), &summary)?;
    println!(
        "{:<12} {:>8} {:>8} {:>10} {:>10} {:>10}",
        "method", "AUC", "sd", "F-err", "rel F-err", "max err"
    );
    for (name, s) in &summary.methods {
        let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        println!(
            "{:<12} {:>8.4} {:>8.4} {:>10} {:>10} {:>10}",
            name,
            s.auc_mean,
            s.auc_sd,
            fmt(s.frobenius_mean),
            fmt(s.rel_frobenius_mean),
            fmt(s.max_error_mean)
        );
    }
    Ok(())
}

fn cmd_lowerbound(args: &LowerboundArgs, seed: u64, out: &Path) -> Result<()> {
    if args.seeds == 0 {
        return Err(Error::InvalidParameter("--seeds must be positive".into()));
    }
    let template = LowerBoundSpec {
        c_star: args.c_star,
        ..LowerBoundSpec::new(2)
    };
    for &n in &args.sizes {
        LowerBoundSpec { n, ..template.clone() }.validate()?;
    }
    let seeds: Vec<u64> = (0..args.seeds as u64).map(|s| seed.wrapping_add(s)).collect();
    let curve = regret_curve(&args.sizes, &template, &seeds)?;
    prepare_out(out)?;
    let path = out.join("lowerbound.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| Error::Format {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    for p in &curve {
        w.serialize(p).map_err(|e| Error::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        })?;
        println!("n={} regret={:.6} ew_fpr={:.4}", p.n, p.regret, p.ew_fpr);
    }
    w.flush().map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn execute(cli: &Cli) -> Result<()> {
    let run = || match &cli.command {
        Command::Generate(a) => cmd_generate(a, cli.seed, &cli.out),
        Command::Detect(a) => cmd_detect(a, cli.seed, &cli.out),
        Command::Baseline(a) => cmd_baseline(a, &cli.out),
        Command::Evaluate(a) => cmd_evaluate(a, cli.seed, &cli.out),
        Command::Bench(a) => cmd_bench(a, cli.seed, &cli.out),
        Command::Lowerbound(a) => cmd_lowerbound(a, cli.seed, &cli.out),
    };
    match cli.threads {
        Some(0) => Err(Error::InvalidParameter("--threads must be positive".into())),
        Some(k) => rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

fn one_line(msg: &str) -> String {
    msg.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Failures print `error: kind=<tag> msg=<text>` as a single stderr line.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: kind=usage msg={}", one_line(first));
            return 2;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), one_line(&e.to_string()));
            1
        }
    }
}
