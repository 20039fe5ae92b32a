//! Randomized invariants checked against independent brute-force references.

use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use entrywise::baselines::{drmf, soft_impute, stable_pcp, SolverOptions};
use entrywise::detector::{greedy_fill, solve_oracle, EwPipeline};
use entrywise::eval::{oracle_roc, roc_from_scores, tpr_fpr, true_posterior};
use entrywise::linalg::truncated_svd;
use entrywise::simgen::generate;
use entrywise::{
    DetectorConfig, Entry, GenerationSpec, ModelId, SparseObservations, TheoreticalConstants,
};

/// `e^{-λ} λ^k / k!` by a running product, no shared helpers.
fn naive_poisson(k: u64, lambda: f64) -> f64 {
    let mut p = (-lambda).exp();
    for i in 1..=k {
        p *= lambda / i as f64;
    }
    p
}

/// Anomaly pmf computed from the model's definition.
fn naive_anomaly(model: ModelId, k: u64, alpha: &[f64], rate: f64) -> f64 {
    match model {
        ModelId::PoissonThinned => naive_poisson(k, alpha[0] * rate),
        ModelId::Zero => (k == 0) as u8 as f64,
        ModelId::ExpOnset => {
            // Composite Simpson over the onset density, plus the atom at 1.
            let a = alpha[0];
            let steps = 4000;
            let h = 1.0 / steps as f64;
            let g = |u: f64| (-u / a).exp() / a * naive_poisson(k, u * rate);
            let mut s = g(0.0) + g(1.0);
            for i in 1..steps {
                s += g(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            s * h / 3.0 + (-1.0 / a).exp() * naive_poisson(k, rate)
        }
    }
}

fn random_obs(seed: u64, n: usize, m: usize, keep: f64) -> SparseObservations {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    for row in 0..n {
        for col in 0..m {
            if rng.random_bool(keep) {
                let base = 1.0 + (row % 3) as f64 * (1.0 + (col % 2) as f64);
                entries.push(Entry { row, col, count: (base * rng.random_range(0.5..2.0)).round() as u64 });
            }
        }
    }
    if entries.is_empty() {
        entries.push(Entry { row: 0, col: 0, count: 1 });
    }
    SparseObservations::from_entries(n, m, entries).unwrap()
}

fn small_spec(seed: u64, model: ModelId, p_obs: f64, p_anom: f64, alpha: f64) -> GenerationSpec {
    GenerationSpec {
        n: 9,
        m: 7,
        rank: 2,
        mean_level: 4.0,
        p_obs,
        p_anom,
        alpha: if model == ModelId::Zero { vec![] } else { vec![alpha] },
        model,
        seed,
    }
}

fn any_model() -> impl Strategy<Value = ModelId> {
    prop_oneof![Just(ModelId::PoissonThinned), Just(ModelId::ExpOnset), Just(ModelId::Zero)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn posterior_matches_bayes_rule(
        seed in any::<u64>(),
        model in prop_oneof![Just(ModelId::PoissonThinned), Just(ModelId::Zero)],
        p_anom in 0.0f64..0.5,
        alpha in 0.05f64..1.0,
    ) {
        let instance = generate(&small_spec(seed, model, 0.9, p_anom, alpha)).unwrap();
        let truth = instance.truth.as_ref().unwrap();
        let f = true_posterior(&instance).unwrap();
        for (e, f) in instance.obs.entries().iter().zip(&f) {
            let rate = truth.rates.get(e.row, e.col);
            let y = (1.0 - p_anom) * naive_poisson(e.count, rate);
            let x = p_anom * naive_anomaly(model, e.count, &truth.params.alpha, rate);
            let want = if x + y > 0.0 { y / (x + y) } else { 0.0 };
            prop_assert!((f - want).abs() <= 1e-12, "k={} rate={rate} got {f} want {want}", e.count);
        }
    }

    #[test]
    fn exp_onset_pmf_matches_quadrature(k in 0u64..25, alpha in 0.05f64..1.0, rate in 0.1f64..20.0) {
        let got = ModelId::ExpOnset.model().pmf(k, &[alpha], rate);
        let want = naive_anomaly(ModelId::ExpOnset, k, &[alpha], rate);
        prop_assert!((got - want).abs() <= 1e-8 * want.max(1e-6), "got {got} want {want}");
    }

    #[test]
    fn pmfs_normalize(model in any_model(), alpha in 0.01f64..1.0, rate in 0.0f64..40.0) {
        let alpha = if model == ModelId::Zero { vec![] } else { vec![alpha] };
        let total: f64 = (0..400).map(|k| model.model().pmf(k, &alpha, rate)).sum();
        prop_assert!((total - 1.0).abs() <= 1e-6, "{model}: {total}");
    }

    #[test]
    fn svd_projection_is_optimal(n in 2usize..=12, m in 2usize..=12, r in 1usize..4, seed in any::<u64>()) {
        let r = r.min(n.min(m));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = DMatrix::from_fn(n, m, |_, _| rng.random_range(-3.0..3.0));
        let svd = truncated_svd(&a, r, 1e-12).unwrap();
        let best = (&a - svd.reconstruct()).norm_squared();

        // Eckart–Young: the residual equals the discarded spectrum, taken here
        // from an eigendecomposition of AᵀA.
        let mut eig: Vec<f64> = (a.transpose() * &a).symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
        eig.sort_by(|x, y| y.total_cmp(x));
        let tail: f64 = eig.iter().skip(r).sum();
        prop_assert!((best - tail).abs() <= 1e-8 * (1.0 + a.norm_squared()));

        // No nearby rank-r matrix does better: perturb both factors.
        let mut us = svd.u.clone();
        for (j, s) in svd.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        for _ in 0..8 {
            let l = DMatrix::from_fn(n, r, |_, _| rng.random_range(-0.1..0.1));
            let rt = DMatrix::from_fn(m, r, |_, _| rng.random_range(-0.1..0.1));
            let cand: DMatrix<f64> = (&us + l) * (&svd.v + rt).transpose();
            prop_assert!((&a - cand).norm_squared() >= best - 1e-9);
        }
    }

    #[test]
    fn soft_impute_objective_never_increases(seed in any::<u64>(), lambda in 0.1f64..20.0) {
        let obs = random_obs(seed, 10, 8, 0.7);
        let d = soft_impute(&obs, lambda, &SolverOptions::default()).unwrap();
        for w in d.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn stable_pcp_objective_never_increases(
        seed in any::<u64>(),
        lambda in 0.05f64..2.0,
        mu in 0.05f64..2.0,
        capped in any::<bool>(),
    ) {
        let obs = random_obs(seed, 10, 8, 0.7);
        let cap = capped.then_some(6.0);
        let d = stable_pcp(&obs, lambda, mu, cap, &SolverOptions::default()).unwrap();
        for w in d.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn drmf_residual_never_increases(seed in any::<u64>(), rank in 1usize..3, frac in 0.0f64..0.3) {
        let obs = random_obs(seed, 10, 8, 0.8);
        let e = (frac * obs.len() as f64) as usize;
        let d = drmf(&obs, rank, e, &SolverOptions::default()).unwrap();
        for w in d.trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-9, "{} -> {}", w[0], w[1]);
        }
        let support = d.a_hat.iter().filter(|v| **v != 0.0).count();
        prop_assert!(support <= e);
    }

    #[test]
    fn greedy_is_feasible_and_saturating(
        costs in prop::collection::vec(0.0f64..1.0, 1..60),
        budget in 0.0f64..10.0,
    ) {
        let t = greedy_fill(&costs, budget);
        let used: f64 = t.iter().zip(&costs).map(|(t, c)| t * c).sum();
        prop_assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(used <= budget + 1e-9);
        // Either everything is selected or the budget is exhausted.
        if t.iter().any(|v| *v < 1.0) {
            prop_assert!(used >= budget - 1e-9);
        }
    }

    #[test]
    fn rates_and_curves_stay_in_range(seed in any::<u64>(), model in any_model(), gamma in 0.0f64..1.0) {
        let instance = generate(&small_spec(seed, model, 0.9, 0.1, 0.3)).unwrap();
        let f_star = true_posterior(&instance).unwrap();
        let t = solve_oracle(&f_star, gamma).unwrap();
        let (tpr, fpr) = tpr_fpr(&t, &f_star).unwrap();
        prop_assert!((0.0..=1.0).contains(&tpr) && (0.0..=1.0).contains(&fpr));
        prop_assert!(fpr <= gamma + 1e-9);

        let roc = oracle_roc(&f_star, &[gamma.max(1e-3), 0.5]).unwrap();
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        let scores: Vec<f64> = instance.obs.entries().iter().map(|e| e.count as f64).collect();
        let roc = roc_from_scores(&scores, &f_star).unwrap();
        prop_assert!((0.0..=1.0).contains(&roc.auc));
        prop_assert!(roc.points.windows(2).all(|w| w[0].fpr <= w[1].fpr));
    }

    #[test]
    fn band_is_ordered(seed in any::<u64>(), width in 0.0f64..0.3) {
        let instance = generate(&small_spec(seed, ModelId::PoissonThinned, 0.9, 0.1, 0.3)).unwrap();
        let mut cfg = DetectorConfig::new(2, ModelId::PoissonThinned);
        cfg.band = entrywise::BandMode::Fixed { half_width: width };
        cfg.grid_points = 5;
        let p = EwPipeline::prepare(&instance.obs, &cfg, &TheoreticalConstants::default()).unwrap();
        for b in &p.band.entries {
            prop_assert!(0.0 <= b.f_l && b.f_l <= b.f_point && b.f_point <= b.f_r && b.f_r <= 1.0);
        }
    }
}
