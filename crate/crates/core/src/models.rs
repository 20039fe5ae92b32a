//! Probability kernels: Poisson pmf/cdf, the anomaly-model contract and the
//! per-entry posterior probability of *not* being anomalous.
//!
//! Every pmf is evaluated in log space through `ln Γ`, so counts in the
//! thousands stay finite.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::RngCore;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::types::{Interval, ModelParams, ThetaDomain};

/// Below this the exponential-onset parameter is treated as a point mass at 0.
const ALPHA_EPS: f64 = 1e-12;

/// Truncation point used for normalization checks: `⌈M + 12 sqrt(M + 1) + 20⌉`.
pub fn truncation_point(rate: f64) -> u64 {
    (rate + 12.0 * (rate + 1.0).sqrt() + 20.0).ceil() as u64
}

/// Counts below this read `ln k!` from a table instead of `ln Γ`.
const LN_FACTORIAL_TABLE: usize = 1024;

fn ln_factorial(k: u64) -> f64 {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    let table = TABLE.get_or_init(|| {
        (0..LN_FACTORIAL_TABLE)
            .map(|i| ln_gamma(i as f64 + 1.0))
            .collect()
    });
    match table.get(k as usize) {
        Some(v) => *v,
        None => ln_gamma(k as f64 + 1.0),
    }
}

/// `ln P(Poisson(λ) = k)`.
pub fn poisson_ln_pmf(k: u64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    k as f64 * lambda.ln() - lambda - ln_factorial(k)
}

pub fn poisson_pmf(k: u64, lambda: f64) -> f64 {
    poisson_ln_pmf(k, lambda).exp()
}

/// `(P(X <= k), P(X > k))` for `X ~ Poisson(λ)`, each side summed directly
/// where it is the smaller tail.
pub fn poisson_cdf_and_tail(k: u64, lambda: f64) -> (f64, f64) {
    if lambda == 0.0 {
        return (1.0, 0.0);
    }
    if (k as f64) >= lambda {
        // Upper tail: terms decrease geometrically from k+1 upward.
        let mut term = poisson_pmf(k + 1, lambda);
        let mut tail = 0.0;
        let mut j = k + 1;
        while term > 0.0 {
            tail += term;
            if term < 1e-18 * tail {
                break;
            }
            j += 1;
            term *= lambda / j as f64;
        }
        let tail = tail.min(1.0);
        (1.0 - tail, tail)
    } else {
        // Lower tail: terms decrease going down from k.
        let mut term = poisson_pmf(k, lambda);
        let mut cdf = 0.0;
        let mut j = k;
        loop {
            cdf += term;
            if j == 0 || term < 1e-18 * cdf {
                break;
            }
            term *= j as f64 / lambda;
            j -= 1;
        }
        let cdf = cdf.min(1.0);
        (cdf, 1.0 - cdf)
    }
}

/// Poisson pmf and cdf at `k`.
pub fn poisson_probability(k: u64, lambda: f64) -> Result<(f64, f64)> {
    if !(lambda.is_finite() && lambda >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "Poisson rate must be finite and non-negative, got {lambda}"
        )));
    }
    Ok((poisson_pmf(k, lambda), poisson_cdf_and_tail(k, lambda).0))
}

/// Fills `out[k] = P(Poisson(λ) = k)` for `k = 0..out.len()` by recursion.
pub(crate) fn poisson_pmf_prefix(lambda: f64, out: &mut [f64]) {
    if out.is_empty() {
        return;
    }
    if lambda == 0.0 {
        out.fill(0.0);
        out[0] = 1.0;
        return;
    }
    let mut p = (-lambda).exp();
    for (k, slot) in out.iter_mut().enumerate() {
        if k > 0 {
            p *= lambda / k as f64;
        }
        *slot = p;
    }
}

pub(crate) fn sample_poisson(lambda: f64, rng: &mut dyn RngCore) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda)
        .expect("finite positive rate")
        .sample(rng) as u64
}

/// The behavioral contract every anomaly distribution satisfies:
/// a pmf on the non-negative integers with `E[Anom(α, M)] = g(α) M`.
pub trait AnomalyModel: Sync {
    fn id(&self) -> &'static str;

    /// Dimension `d` of `α`.
    fn alpha_dim(&self) -> usize;

    /// The box `Γ` of admissible `α` values.
    fn alpha_domain(&self) -> Vec<Interval>;

    fn pmf(&self, k: u64, alpha: &[f64], rate: f64) -> f64;

    fn cdf(&self, k: u64, alpha: &[f64], rate: f64) -> f64 {
        (0..=k).map(|j| self.pmf(j, alpha, rate)).sum::<f64>().min(1.0)
    }

    /// `out[k] = pmf(k)` for `k = 0..out.len()`.
    fn pmf_prefix(&self, alpha: &[f64], rate: f64, out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.pmf(k as u64, alpha, rate);
        }
    }

    /// `g(α)`.
    fn mean_factor(&self, alpha: &[f64]) -> f64;

    fn sample(&self, alpha: &[f64], rate: f64, rng: &mut dyn RngCore) -> u64;

    fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        let dom = self.alpha_domain();
        if alpha.len() != dom.len() {
            return Err(Error::DimensionMismatch(format!(
                "model {} takes {} alpha values, got {}",
                self.id(),
                dom.len(),
                alpha.len()
            )));
        }
        for (a, iv) in alpha.iter().zip(&dom) {
            if !iv.contains(*a) {
                return Err(Error::InvalidParameter(format!(
                    "alpha = {a} outside [{}, {}] for model {}",
                    iv.lo,
                    iv.hi,
                    self.id()
                )));
            }
        }
        Ok(())
    }
}

/// `Anom(α, M) = Poisson(α M)`.
#[derive(Debug, Clone, Copy, Default)]
pub struct PoissonThinned;

impl AnomalyModel for PoissonThinned {
    fn id(&self) -> &'static str {
        "poisson-thinned"
    }

    fn alpha_dim(&self) -> usize {
        1
    }

    fn alpha_domain(&self) -> Vec<Interval> {
        vec![Interval { lo: 0.0, hi: 1.0 }]
    }

    fn pmf(&self, k: u64, alpha: &[f64], rate: f64) -> f64 {
        poisson_pmf(k, alpha[0] * rate)
    }

    fn cdf(&self, k: u64, alpha: &[f64], rate: f64) -> f64 {
        poisson_cdf_and_tail(k, alpha[0] * rate).0
    }

    fn pmf_prefix(&self, alpha: &[f64], rate: f64, out: &mut [f64]) {
        poisson_pmf_prefix(alpha[0] * rate, out);
    }

    fn mean_factor(&self, alpha: &[f64]) -> f64 {
        alpha[0]
    }

    fn sample(&self, alpha: &[f64], rate: f64, rng: &mut dyn RngCore) -> u64 {
        sample_poisson(alpha[0] * rate, rng)
    }
}

/// `Anom(α, M) = Poisson(U M)` with `U = min(E, 1)` and `E` exponential with
/// mean `α`: the onset time of the anomaly as a fraction of the period.
///
/// With `a = αM` and `c = M + 1/α` the pmf has the closed form
/// `a^k / (1+a)^(k+1) · P(Poisson(c) > k) + e^(-1/α) · P(Poisson(M) = k)`;
/// the second term is the mass of `E > 1`.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExponentialOnset;

impl ExponentialOnset {
    fn continuous_part(k: u64, alpha: f64, rate: f64) -> f64 {
        let a = alpha * rate;
        let c = rate + 1.0 / alpha;
        let (_, tail) = poisson_cdf_and_tail(k, c);
        if a == 0.0 {
            return if k == 0 { tail } else { 0.0 };
        }
        let kf = k as f64;
        (kf * (a / (1.0 + a)).ln() - (1.0 + a).ln() + tail.ln()).exp()
    }
}

impl AnomalyModel for ExponentialOnset {
    fn id(&self) -> &'static str {
        "exp-onset"
    }

    fn alpha_dim(&self) -> usize {
        1
    }

    fn alpha_domain(&self) -> Vec<Interval> {
        vec![Interval { lo: 0.0, hi: 1.0 }]
    }

    fn pmf(&self, k: u64, alpha: &[f64], rate: f64) -> f64 {
        let alpha = alpha[0];
        if alpha <= ALPHA_EPS || rate == 0.0 {
            return if k == 0 { 1.0 } else { 0.0 };
        }
        let jump = (-1.0 / alpha).exp() * poisson_pmf(k, rate);
        (Self::continuous_part(k, alpha, rate) + jump).min(1.0)
    }

    fn pmf_prefix(&self, alpha: &[f64], rate: f64, out: &mut [f64]) {
        let alpha = alpha[0];
        if out.is_empty() {
            return;
        }
        if alpha <= ALPHA_EPS || rate == 0.0 {
            out.fill(0.0);
            out[0] = 1.0;
            return;
        }
        let a = alpha * rate;
        let c = rate + 1.0 / alpha;
        let ratio = a / (1.0 + a);
        let jump = (-1.0 / alpha).exp();
        let mut geo = 1.0 / (1.0 + a);
        let mut pois_c = (-c).exp();
        let mut tail = 1.0 - pois_c;
        let mut pois_m = (-rate).exp();
        for (k, slot) in out.iter_mut().enumerate() {
            if k > 0 {
                geo *= ratio;
                pois_m *= rate / k as f64;
                pois_c *= c / k as f64;
                tail -= pois_c;
            }
            // Subtraction loses relative accuracy once the tail is tiny.
            let t = if tail < 1e-6 {
                poisson_cdf_and_tail(k as u64, c).1
            } else {
                tail
            };
            *slot = (geo * t + jump * pois_m).min(1.0);
        }
    }

    fn mean_factor(&self, alpha: &[f64]) -> f64 {
        let alpha = alpha[0];
        if alpha <= ALPHA_EPS {
            return 0.0;
        }
        alpha * (1.0 - (-1.0 / alpha).exp())
    }

    fn sample(&self, alpha: &[f64], rate: f64, rng: &mut dyn RngCore) -> u64 {
        let alpha = alpha[0];
        if alpha <= ALPHA_EPS {
            return 0;
        }
        let onset: f64 = Exp::new(1.0 / alpha).expect("positive rate").sample(rng);
        sample_poisson(onset.min(1.0) * rate, rng)
    }
}

/// Anomalous entries are always zero.
#[derive(Debug, Clone, Copy, Default)]
pub struct PointMassZero;

impl AnomalyModel for PointMassZero {
    fn id(&self) -> &'static str {
        "zero"
    }

    fn alpha_dim(&self) -> usize {
        0
    }

    fn alpha_domain(&self) -> Vec<Interval> {
        Vec::new()
    }

    fn pmf(&self, k: u64, _alpha: &[f64], _rate: f64) -> f64 {
        if k == 0 {
            1.0
        } else {
            0.0
        }
    }

    fn cdf(&self, _k: u64, _alpha: &[f64], _rate: f64) -> f64 {
        1.0
    }

    fn mean_factor(&self, _alpha: &[f64]) -> f64 {
        0.0
    }

    fn sample(&self, _alpha: &[f64], _rate: f64, _rng: &mut dyn RngCore) -> u64 {
        0
    }
}

/// Identifier of a built-in anomaly model, as used in configs and files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelId {
    PoissonThinned,
    ExpOnset,
    Zero,
}

impl ModelId {
    pub fn model(&self) -> &'static dyn AnomalyModel {
        match self {
            ModelId::PoissonThinned => &PoissonThinned,
            ModelId::ExpOnset => &ExponentialOnset,
            ModelId::Zero => &PointMassZero,
        }
    }

    pub fn alpha_dim(&self) -> usize {
        self.model().alpha_dim()
    }

    pub fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        self.model().check_alpha(alpha)
    }

    /// Search box used by the moment estimator when none is configured:
    /// `p_A ∈ [0, 0.5]` times `Γ`.
    pub fn default_domain(&self) -> ThetaDomain {
        ThetaDomain {
            p_anom: Interval { lo: 0.0, hi: 0.5 },
            alpha: self.model().alpha_domain(),
        }
    }
}

impl fmt::Display for ModelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.model().id())
    }
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "poisson-thinned" => Ok(ModelId::PoissonThinned),
            "exp-onset" => Ok(ModelId::ExpOnset),
            "zero" => Ok(ModelId::Zero),
            other => Err(Error::UnknownIdentifier(format!("anomaly model `{other}`"))),
        }
    }
}

/// Anomaly pmf and cdf at `k`, after validating `α ∈ Γ`.
pub fn anomaly_eval(
    model: &dyn AnomalyModel,
    alpha: &[f64],
    rate: f64,
    k: u64,
) -> Result<(f64, f64)> {
    model.check_alpha(alpha)?;
    check_rate(rate)?;
    Ok((model.pmf(k, alpha, rate), model.cdf(k, alpha, rate)))
}

pub fn anomaly_sample(
    model: &dyn AnomalyModel,
    alpha: &[f64],
    rate: f64,
    rng: &mut dyn RngCore,
) -> Result<u64> {
    model.check_alpha(alpha)?;
    check_rate(rate)?;
    Ok(model.sample(alpha, rate, rng))
}

pub fn mean_factor(model: &dyn AnomalyModel, alpha: &[f64]) -> Result<f64> {
    model.check_alpha(alpha)?;
    Ok(model.mean_factor(alpha))
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate.is_finite() && rate >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "rate must be finite and non-negative, got {rate}"
        )));
    }
    Ok(())
}

/// Mixture masses at one observed count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorComponents {
    /// `p_A · P_Anom(k)`.
    pub x: f64,
    /// `(1 - p_A) · P_Poisson(k)`.
    pub y: f64,
    /// `y / (x + y)`, or 0 when both masses vanish.
    pub f: f64,
}

impl PosteriorComponents {
    pub fn from_masses(x: f64, y: f64) -> Self {
        let s = x + y;
        let f = if s > 0.0 { y / s } else { 0.0 };
        Self { x, y, f }
    }
}

/// `P(B = 0 | X = k)` under rate `M` and parameters `θ`.
pub fn posterior_nonanomaly(
    k: u64,
    rate: f64,
    theta: &ModelParams,
    model: &dyn AnomalyModel,
) -> PosteriorComponents {
    let x = theta.p_anom * model.pmf(k, &theta.alpha, rate);
    let y = (1.0 - theta.p_anom) * poisson_pmf(k, rate);
    PosteriorComponents::from_masses(x, y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn poisson_closed_forms() {
        let (pmf, cdf) = poisson_probability(0, 1.0).unwrap();
        assert!(close(pmf, (-1.0f64).exp(), 1e-15));
        assert!(close(cdf, (-1.0f64).exp(), 1e-15));
        assert_eq!(poisson_probability(0, 0.0).unwrap(), (1.0, 1.0));
        assert_eq!(poisson_probability(4, 0.0).unwrap().0, 0.0);
        // scipy.stats.poisson(2.5) at k = 3
        let (pmf, cdf) = poisson_probability(3, 2.5).unwrap();
        assert!(close(pmf, 0.21376301724973648, 1e-13));
        assert!(close(cdf, 0.7575761331330662, 1e-13));
        assert!(poisson_probability(1, -0.5).is_err());
    }

    #[test]
    fn poisson_large_counts_stay_finite() {
        let (pmf, cdf) = poisson_probability(10_000, 9_900.0).unwrap();
        assert!(pmf > 0.0 && pmf.is_finite());
        assert!(cdf > 0.8 && cdf < 0.9);
        let (pmf, _) = poisson_probability(10_000, 3.0).unwrap();
        assert_eq!(pmf, 0.0);
    }

    #[test]
    fn thinned_reduces_to_poisson() {
        let (pmf, _) = anomaly_eval(&PoissonThinned, &[0.2], 5.0, 0).unwrap();
        assert!(close(pmf, (-1.0f64).exp(), 1e-15));
    }

    #[test]
    fn point_mass_zero() {
        let (pmf, cdf) = anomaly_eval(&PointMassZero, &[], 3.0, 1).unwrap();
        assert_eq!((pmf, cdf), (0.0, 1.0));
        assert_eq!(PointMassZero.pmf(0, &[], 3.0), 1.0);
    }

    #[test]
    fn alpha_outside_domain_rejected() {
        assert!(anomaly_eval(&PoissonThinned, &[1.5], 1.0, 0).is_err());
        assert!(anomaly_eval(&ExponentialOnset, &[-0.1], 1.0, 0).is_err());
        assert!(anomaly_eval(&PoissonThinned, &[], 1.0, 0).is_err());
    }

    /// Composite Simpson over the onset density plus the atom at `U = 1`.
    fn onset_quadrature(k: u64, alpha: f64, rate: f64) -> f64 {
        let steps = 20_000;
        let h = 1.0 / steps as f64;
        let f = |u: f64| {
            let lam: f64 = u * rate;
            let pois = if lam == 0.0 {
                if k == 0 {
                    1.0
                } else {
                    0.0
                }
            } else {
                (-lam + k as f64 * lam.ln() - (1..=k).map(|j| (j as f64).ln()).sum::<f64>()).exp()
            };
            pois * (-u / alpha).exp() / alpha
        };
        let mut s = f(0.0) + f(1.0);
        for i in 1..steps {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(i as f64 * h);
        }
        s * h / 3.0 + (-1.0 / alpha).exp() * poisson_pmf(k, rate)
    }

    #[test]
    fn onset_closed_form_matches_quadrature() {
        for &(alpha, rate) in &[(0.2, 5.0), (0.7, 4.0), (1.0, 0.3), (0.05, 12.0)] {
            for k in 0..12 {
                let q = onset_quadrature(k, alpha, rate);
                let p = ExponentialOnset.pmf(k, &[alpha], rate);
                assert!(close(p, q, 1e-10), "alpha {alpha} rate {rate} k {k}: {p} vs {q}");
            }
        }
        // scipy.integrate.quad values
        let frozen = [
            (0, 0.2663921613578368),
            (1, 0.2059917608634952),
            (3, 0.12999768831337266),
            (7, 0.01991038912165349),
        ];
        for (k, v) in frozen {
            assert!(close(ExponentialOnset.pmf(k, &[0.7], 4.0), v, 1e-12));
        }
    }

    #[test]
    fn onset_pmf_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let exp = Exp::new(5.0).unwrap();
        let draws = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..draws {
            let e: f64 = exp.sample(&mut rng);
            acc += (-5.0 * e.min(1.0)).exp();
        }
        let mc = acc / draws as f64;
        let p = ExponentialOnset.pmf(0, &[0.2], 5.0);
        assert!(close(p, mc, 5e-4), "{p} vs {mc}");
        assert!(close(p, 0.5000226999648812, 1e-12));
    }

    #[test]
    fn prefix_matches_pointwise() {
        let models: [&dyn AnomalyModel; 3] = [&PoissonThinned, &ExponentialOnset, &PointMassZero];
        for model in models {
            let alpha: Vec<f64> = if model.alpha_dim() == 1 { vec![0.45] } else { vec![] };
            for &rate in &[0.0, 0.3, 2.0, 17.0, 60.0] {
                let mut out = [0.0; 9];
                model.pmf_prefix(&alpha, rate, &mut out);
                for (k, v) in out.iter().enumerate() {
                    let p = model.pmf(k as u64, &alpha, rate);
                    assert!(close(*v, p, 1e-12 * p.max(1e-300) + 1e-15), "{} k={k} rate={rate}", model.id());
                }
            }
        }
    }

    #[test]
    fn mean_factors() {
        assert_eq!(mean_factor(&PoissonThinned, &[0.3]).unwrap(), 0.3);
        assert_eq!(mean_factor(&PointMassZero, &[]).unwrap(), 0.0);
        let g = mean_factor(&ExponentialOnset, &[0.2]).unwrap();
        assert!(close(g, 0.1986524106001829, 1e-15));
    }

    #[test]
    fn sampler_edge_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert_eq!(anomaly_sample(&PointMassZero, &[], 7.0, &mut rng).unwrap(), 0);
            assert_eq!(anomaly_sample(&PoissonThinned, &[0.0], 7.0, &mut rng).unwrap(), 0);
        }
    }

    #[test]
    fn thinned_sampler_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draws = 100_000;
        let total: u64 = (0..draws)
            .map(|_| PoissonThinned.sample(&[0.5], 4.0, &mut rng))
            .sum();
        let mean = total as f64 / draws as f64;
        assert!(close(mean, 2.0, 0.05), "{mean}");
    }

    #[test]
    fn posterior_examples() {
        let theta = ModelParams::new(0.0, vec![0.3]).unwrap();
        for k in 0..20 {
            assert_eq!(posterior_nonanomaly(k, 3.0, &theta, &PoissonThinned).f, 1.0);
        }
        let half = ModelParams::new(0.5, vec![]).unwrap();
        let p = posterior_nonanomaly(0, 1.0, &half, &PointMassZero);
        assert!(close(p.f, 0.2689414213699951, 1e-15));
        for k in 1..10 {
            assert_eq!(posterior_nonanomaly(k, 1.0, &half, &PointMassZero).f, 1.0);
        }
    }

    #[test]
    fn posterior_degenerate_convention() {
        // Zero rate and zero p_A: the Poisson mass at k = 3 vanishes, as does the anomaly mass.
        let theta = ModelParams::new(0.0, vec![]).unwrap();
        let p = posterior_nonanomaly(3, 0.0, &theta, &PointMassZero);
        assert_eq!((p.x, p.y, p.f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn model_ids_round_trip() {
        for id in [ModelId::PoissonThinned, ModelId::ExpOnset, ModelId::Zero] {
            assert_eq!(id.to_string().parse::<ModelId>().unwrap(), id);
        }
        assert!("gaussian".parse::<ModelId>().is_err());
    }
}
