//! Synthetic instance generation: the Gamma-factor ensemble, the thinning
//! perturbation of a base matrix, and the two-point lower-bound family.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{sample_poisson, ModelId};
use crate::types::{
    validate_instance, AnomalyMask, Entry, GenerationSpec, Instance, ModelParams, RateMatrix,
    SparseObservations, Truth,
};

/// `M = k U Vᵀ` with i.i.d. Gamma(shape 1, scale 2) factors, scaled so the
/// grand mean equals `mean_level`.
pub fn gen_rate_matrix(
    n: usize,
    m: usize,
    rank: usize,
    mean_level: f64,
    rng: &mut dyn RngCore,
) -> Result<RateMatrix> {
    if rank == 0 || rank > n.min(m) {
        return Err(Error::RankOutOfRange { rank, n, m });
    }
    if !(mean_level > 0.0 && mean_level.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "mean level must be positive, got {mean_level}"
        )));
    }
    let gamma = Gamma::new(1.0, 2.0).expect("valid Gamma parameters");
    let u = DMatrix::from_fn(n, rank, |_, _| gamma.sample(rng));
    let v = DMatrix::from_fn(m, rank, |_, _| gamma.sample(rng));
    let raw = &u * v.transpose();
    let mean = raw.mean();
    RateMatrix::new(raw * (mean_level / mean))
}

/// Draws observations entry by entry in row-major order: observed with
/// probability `p_obs`, then anomalous with probability `p_anom`.
pub fn gen_observation(
    rates: &RateMatrix,
    p_obs: f64,
    p_anom: f64,
    alpha: &[f64],
    model: ModelId,
    rng: &mut dyn RngCore,
) -> Result<(SparseObservations, AnomalyMask)> {
    check_probability("p_O", p_obs)?;
    check_probability("p_A", p_anom)?;
    model.check_alpha(alpha)?;
    let anomaly = model.model();
    let (n, m) = (rates.nrows(), rates.ncols());
    let mut entries = Vec::new();
    let mut anomalous = Vec::new();
    for i in 0..n {
        for j in 0..m {
            if !rng.random_bool(p_obs) {
                continue;
            }
            let rate = rates.get(i, j);
            let count = if rng.random_bool(p_anom) {
                anomalous.push((i, j));
                anomaly.sample(alpha, rate, rng)
            } else {
                sample_poisson(rate, rng)
            };
            entries.push(Entry { row: i, col: j, count });
        }
    }
    Ok((
        SparseObservations::from_entries(n, m, entries)?,
        AnomalyMask::new(n, m, anomalous)?,
    ))
}

fn check_probability(name: &str, p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("{name} = {p} outside [0, 1]")));
    }
    Ok(())
}

/// A complete synthetic instance from a [`GenerationSpec`].
pub fn generate(spec: &GenerationSpec) -> Result<Instance> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let rates = gen_rate_matrix(spec.n, spec.m, spec.rank, spec.mean_level, &mut rng)?;
    let (obs, mask) = gen_observation(&rates, spec.p_obs, spec.p_anom, &spec.alpha, spec.model, &mut rng)?;
    validate_instance(
        obs,
        Some(Truth {
            rates,
            mask,
            params: ModelParams::new(spec.p_anom, spec.alpha.clone())?,
            model: spec.model,
        }),
    )
}

/// Closed ranges for the sampled ensemble parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleRanges {
    pub n: usize,
    pub m: usize,
    pub rank: (usize, usize),
    pub mean_level: (f64, f64),
    pub p_obs: (f64, f64),
    pub p_anom: (f64, f64),
    pub alpha: (f64, f64),
    pub model: ModelId,
}

impl Default for EnsembleRanges {
    fn default() -> Self {
        Self {
            n: 100,
            m: 100,
            rank: (1, 10),
            mean_level: (1.0, 10.0),
            p_obs: (0.5, 1.0),
            p_anom: (0.0, 0.3),
            alpha: (0.0, 1.0),
            model: ModelId::ExpOnset,
        }
    }
}

impl EnsembleRanges {
    fn validate(&self) -> Result<()> {
        let ordered = |(lo, hi): (f64, f64)| lo <= hi && lo.is_finite() && hi.is_finite();
        if self.rank.0 == 0 || self.rank.0 > self.rank.1 || self.rank.1 > self.n.min(self.m) {
            return Err(Error::InvalidParameter(format!(
                "rank range {:?} invalid for {}x{}",
                self.rank, self.n, self.m
            )));
        }
        for (name, r) in [
            ("mean level", self.mean_level),
            ("p_O", self.p_obs),
            ("p_A", self.p_anom),
            ("alpha", self.alpha),
        ] {
            if !ordered(r) {
                return Err(Error::InvalidParameter(format!("{name} range {r:?} invalid")));
            }
        }
        if self.mean_level.0 <= 0.0 {
            return Err(Error::InvalidParameter("mean level must be positive".into()));
        }
        Ok(())
    }

    /// Samples one member's parameters. The model's `α` dimension decides how
    /// many values are drawn from the `alpha` range.
    pub fn sample_spec(&self, seed: u64) -> GenerationSpec {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let uniform = |rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..hi)
            }
        };
        let rank = rng.random_range(self.rank.0..=self.rank.1);
        let mean_level = uniform(&mut rng, self.mean_level);
        let p_obs = uniform(&mut rng, self.p_obs);
        let p_anom = uniform(&mut rng, self.p_anom);
        let alpha = (0..self.model.alpha_dim())
            .map(|_| uniform(&mut rng, self.alpha))
            .collect();
        GenerationSpec {
            n: self.n,
            m: self.m,
            rank,
            mean_level,
            p_obs,
            p_anom,
            alpha,
            model: self.model,
            seed: rng.next_u64(),
        }
    }
}

/// One ensemble member: its sampled parameters and the generated instance.
#[derive(Debug, Clone)]
pub struct EnsembleMember {
    pub index: usize,
    pub spec: GenerationSpec,
    pub instance: Instance,
}

/// Member `i` derives all of its randomness from `master_seed ^ i`.
pub fn ensemble_member(ranges: &EnsembleRanges, master_seed: u64, index: usize) -> Result<EnsembleMember> {
    ranges.validate()?;
    let spec = ranges.sample_spec(master_seed ^ index as u64);
    let instance = generate(&spec)?;
    Ok(EnsembleMember { index, spec, instance })
}

pub fn gen_ensemble(count: usize, ranges: &EnsembleRanges, master_seed: u64) -> Result<Vec<EnsembleMember>> {
    if count == 0 {
        return Err(Error::InvalidParameter("ensemble needs at least one member".into()));
    }
    ranges.validate()?;
    (0..count)
        .into_par_iter()
        .map(|i| ensemble_member(ranges, master_seed, i))
        .collect()
}

/// Treats `base` as the truth on the observed pattern of `pattern`: draws
/// Poisson counts, flags each observed entry with probability `p_anom` and
/// thins flagged counts binomially with retention `alpha`.
pub fn thin_perturb(
    base: &RateMatrix,
    pattern: &SparseObservations,
    p_anom: f64,
    alpha: f64,
    rng: &mut dyn RngCore,
) -> Result<(SparseObservations, AnomalyMask)> {
    check_probability("p_A", p_anom)?;
    check_probability("alpha", alpha)?;
    let (n, m) = (base.nrows(), base.ncols());
    if pattern.n() != n || pattern.m() != m {
        return Err(Error::DimensionMismatch(format!(
            "pattern is {}x{}, base is {n}x{m}",
            pattern.n(),
            pattern.m()
        )));
    }
    let mut entries = Vec::with_capacity(pattern.len());
    let mut anomalous = Vec::new();
    for (i, j) in pattern.positions() {
        let mut count = sample_poisson(base.get(i, j), rng);
        if rng.random_bool(p_anom) {
            anomalous.push((i, j));
            count = Binomial::new(count, alpha)
                .expect("retention in [0, 1]")
                .sample(rng);
        }
        entries.push(Entry { row: i, col: j, count });
    }
    Ok((
        SparseObservations::from_entries(n, m, entries)?,
        AnomalyMask::new(n, m, anomalous)?,
    ))
}

/// `γ = 1/(2e)` for the lower-bound family.
pub const LOWER_BOUND_GAMMA: f64 = 0.5 / std::f64::consts::E;
pub const DEFAULT_C_STAR: f64 = 0.4;

/// One member of the two-point lower-bound family on `n × n` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowerBoundSpec {
    pub n: usize,
    pub c_star: f64,
    /// One bit per row pair; `None` draws them uniformly.
    pub bits: Option<Vec<bool>>,
}

impl LowerBoundSpec {
    pub fn new(n: usize) -> Self {
        Self {
            n,
            c_star: DEFAULT_C_STAR,
            bits: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || !self.n.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!(
                "lower-bound size must be even and positive, got {}",
                self.n
            )));
        }
        if !(self.c_star > 0.0 && self.c_star < 0.5) {
            return Err(Error::InvalidParameter(format!(
                "c* = {} outside (0, 1/2)",
                self.c_star
            )));
        }
        if let Some(b) = &self.bits {
            if b.len() != self.n / 2 {
                return Err(Error::DimensionMismatch(format!(
                    "need {} bits, got {}",
                    self.n / 2,
                    b.len()
                )));
            }
        }
        Ok(())
    }

    /// The smaller of the two row levels, `1 − c*/√n`.
    pub fn low_level(&self) -> f64 {
        1.0 - self.c_star / (self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct LowerBoundInstance {
    pub bits: Vec<bool>,
    pub instance: Instance,
}

/// Row pair `(2i, 2i+1)` gets levels `(1, low)` when `b_i` is false and
/// `(low, 1)` when true. Fully observed; anomalies (w.p. 1/2) are zeros.
pub fn gen_lowerbound_instance(spec: &LowerBoundSpec, rng: &mut dyn RngCore) -> Result<LowerBoundInstance> {
    spec.validate()?;
    let n = spec.n;
    let bits: Vec<bool> = match &spec.bits {
        Some(b) => b.clone(),
        None => (0..n / 2).map(|_| rng.random_bool(0.5)).collect(),
    };
    let low = spec.low_level();
    let levels: Vec<f64> = bits
        .iter()
        .flat_map(|&b| if b { [low, 1.0] } else { [1.0, low] })
        .collect();
    let rates = RateMatrix::new(DMatrix::from_fn(n, n, |i, _| levels[i]))?;
    let (obs, mask) = gen_observation(&rates, 1.0, 0.5, &[], ModelId::Zero, rng)?;
    let instance = validate_instance(
        obs,
        Some(Truth {
            rates,
            mask,
            params: ModelParams::new(0.5, Vec::new())?,
            model: ModelId::Zero,
        }),
    )?;
    Ok(LowerBoundInstance { bits, instance })
}
