//! Truncated SVD and singular-value soft-thresholding.
//!
//! Matrices whose smaller side is at most [`DENSE_SVD_LIMIT`] go through a
//! full bidiagonalization SVD; larger ones use seeded randomized subspace
//! iteration.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub const DENSE_SVD_LIMIT: usize = 512;
pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 300;
const OVERSAMPLING: usize = 8;
const POWER_ITERATIONS: usize = 4;

/// Leading singular triplets, `sigma` non-increasing.
#[derive(Debug, Clone)]
pub struct SvdTriple {
    /// `n x r`, orthonormal columns.
    pub u: DMatrix<f64>,
    pub sigma: Vec<f64>,
    /// `m x r`, orthonormal columns.
    pub v: DMatrix<f64>,
}

impl SvdTriple {
    pub fn rank(&self) -> usize {
        self.sigma.len()
    }

    /// `U diag(σ) Vᵀ`.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        let mut us = self.u.clone();
        for (j, s) in self.sigma.iter().enumerate() {
            us.column_mut(j).scale_mut(*s);
        }
        us * self.v.transpose()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SvdOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Seed of the Gaussian test matrix (randomized path only).
    pub seed: u64,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            max_iter: DEFAULT_MAX_ITER,
            seed: 0,
        }
    }
}

/// Best rank-`r` approximation factors of `a`.
pub fn truncated_svd(a: &DMatrix<f64>, rank: usize, tol: f64) -> Result<SvdTriple> {
    truncated_svd_with(
        a,
        rank,
        &SvdOptions {
            tol,
            ..SvdOptions::default()
        },
    )
}

pub fn truncated_svd_with(a: &DMatrix<f64>, rank: usize, opts: &SvdOptions) -> Result<SvdTriple> {
    let (n, m) = a.shape();
    if rank == 0 || rank > n.min(m) {
        return Err(Error::RankOutOfRange { rank, n, m });
    }
    if !(opts.tol > 0.0) {
        return Err(Error::InvalidParameter(format!("tol must be positive, got {}", opts.tol)));
    }
    if n.min(m) <= DENSE_SVD_LIMIT {
        let full = full_svd(a)?;
        Ok(SvdTriple {
            u: full.u.columns(0, rank).into_owned(),
            sigma: full.sigma[..rank].to_vec(),
            v: full.v.columns(0, rank).into_owned(),
        })
    } else {
        randomized_svd(a, rank, opts)
    }
}

fn to_faer(a: &DMatrix<f64>) -> faer::Mat<f64> {
    faer::Mat::from_fn(a.nrows(), a.ncols(), |i, j| a[(i, j)])
}

/// faer's AVX kernels can return with the upper halves of the YMM registers
/// dirty; every legacy-SSE instruction afterwards (libm's `exp`/`ln` among
/// them) then pays a false dependency, slowing scalar code by an order of
/// magnitude. Clearing the upper state after each call avoids that.
#[inline]
fn clear_upper_simd_state() {
    #[cfg(target_arch = "x86_64")]
    {
        #[target_feature(enable = "avx")]
        unsafe fn zeroupper() {
            std::arch::x86_64::_mm256_zeroupper();
        }
        if std::arch::is_x86_feature_detected!("avx") {
            // SAFETY: AVX support was just detected.
            unsafe { zeroupper() }
        }
    }
}

/// Full thin SVD, sorted by decreasing singular value.
///
/// The dense kernel is faer's divide-and-conquer SVD; nalgebra's
/// implicit-shift iteration was observed to return inaccurate factors for
/// some well-conditioned inputs.
pub fn full_svd(a: &DMatrix<f64>) -> Result<SvdTriple> {
    let svd = to_faer(a).thin_svd();
    clear_upper_simd_state();
    let svd = svd.map_err(|_| Error::NonConvergence {
        iterations: 0,
        residual: f64::NAN,
    })?;
    let (u, v, s) = (svd.U(), svd.V(), svd.S().column_vector());
    let k = s.nrows();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s[j].total_cmp(&s[i]).then(i.cmp(&j)));
    let mut u_sorted = DMatrix::zeros(a.nrows(), k);
    let mut v_sorted = DMatrix::zeros(a.ncols(), k);
    let mut sigma = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        for i in 0..a.nrows() {
            u_sorted[(i, dst)] = u[(i, src)];
        }
        for i in 0..a.ncols() {
            v_sorted[(i, dst)] = v[(i, src)];
        }
        sigma.push(s[src].max(0.0));
    }
    Ok(SvdTriple {
        u: u_sorted,
        sigma,
        v: v_sorted,
    })
}

fn orthonormal_basis(y: DMatrix<f64>) -> DMatrix<f64> {
    y.qr().q()
}

fn randomized_svd(a: &DMatrix<f64>, rank: usize, opts: &SvdOptions) -> Result<SvdTriple> {
    let (n, m) = a.shape();
    let k = (rank + OVERSAMPLING).min(n.min(m));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let omega = DMatrix::from_fn(m, k, |_, _| StandardNormal.sample(&mut rng));
    let at = a.transpose();
    let mut q = orthonormal_basis(a * omega);
    let mut residual = f64::INFINITY;
    for iter in 1..=opts.max_iter {
        q = orthonormal_basis(&at * &q);
        q = orthonormal_basis(a * &q);
        if iter < POWER_ITERATIONS {
            continue;
        }
        // Project and solve the small problem.
        let b = q.transpose() * a;
        let small = full_svd(&b)?;
        let u = &q * small.u.columns(0, rank);
        let v = small.v.columns(0, rank).into_owned();
        let sigma = small.sigma[..rank].to_vec();
        let mut r = a * &v;
        for j in 0..rank {
            let col = u.column(j) * sigma[j];
            let mut rc = r.column_mut(j);
            rc -= col;
        }
        let scale = sigma[0].max(f64::MIN_POSITIVE);
        residual = r.norm() / scale;
        if residual <= opts.tol {
            return Ok(SvdTriple { u, sigma, v });
        }
    }
    Err(Error::NonConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

/// Result of singular-value soft-thresholding.
#[derive(Debug, Clone)]
pub struct Shrunk {
    pub matrix: DMatrix<f64>,
    /// Singular values after shrinkage (zeros dropped).
    pub sigma: Vec<f64>,
}

impl Shrunk {
    pub fn nuclear_norm(&self) -> f64 {
        self.sigma.iter().sum()
    }

    pub fn rank(&self) -> usize {
        self.sigma.len()
    }
}

/// `Σ max(σ_i - τ, 0) u_i v_iᵀ`.
pub fn soft_threshold_svd(a: &DMatrix<f64>, tau: f64) -> Result<DMatrix<f64>> {
    Ok(soft_threshold(a, tau)?.matrix)
}

pub fn soft_threshold(a: &DMatrix<f64>, tau: f64) -> Result<Shrunk> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::InvalidParameter(format!("tau must be non-negative, got {tau}")));
    }
    let full = full_svd(a)?;
    let keep = full.sigma.iter().take_while(|s| **s > tau).count();
    let sigma: Vec<f64> = full.sigma[..keep].iter().map(|s| s - tau).collect();
    let matrix = if keep == 0 {
        DMatrix::zeros(a.nrows(), a.ncols())
    } else {
        SvdTriple {
            u: full.u.columns(0, keep).into_owned(),
            sigma: sigma.clone(),
            v: full.v.columns(0, keep).into_owned(),
        }
        .reconstruct()
    };
    Ok(Shrunk { matrix, sigma })
}

/// Number of singular values at least `rel · σ_1`.
pub fn numerical_rank(sigma: &[f64], rel: f64) -> usize {
    match sigma.first() {
        Some(&s1) if s1 > 0.0 => sigma.iter().filter(|s| **s >= rel * s1).count(),
        _ => 0,
    }
}

pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let s = to_faer(a).singular_values();
    clear_upper_simd_state();
    let mut s = s.map_err(|_| Error::NonConvergence {
        iterations: 0,
        residual: f64::NAN,
    })?;
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(s)
}

pub(crate) fn max_abs(a: &DMatrix<f64>) -> f64 {
    a.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}

#[cfg(test)]
pub(crate) fn max_orthonormality_error(q: &DMatrix<f64>) -> f64 {
    let g = q.transpose() * q;
    let id = DMatrix::<f64>::identity(g.nrows(), g.ncols());
    max_abs(&(g - id))
}

#[allow(dead_code)]
pub(crate) fn diag(values: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// One-sided Jacobi SVD, independent of the bidiagonalization path.
    fn jacobi_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
        let mut w = if a.nrows() >= a.ncols() {
            a.clone()
        } else {
            a.transpose()
        };
        let cols = w.ncols();
        for _sweep in 0..100 {
            let mut off = 0.0f64;
            for p in 0..cols {
                for q in p + 1..cols {
                    let alpha: f64 = w.column(p).norm_squared();
                    let beta: f64 = w.column(q).norm_squared();
                    let gamma: f64 = w.column(p).dot(&w.column(q));
                    if gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                        continue;
                    }
                    off = off.max(gamma.abs() / (alpha * beta).sqrt());
                    let zeta = (beta - alpha) / (2.0 * gamma);
                    let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                    let t = if zeta == 0.0 { 1.0 } else { t };
                    let c = 1.0 / (1.0 + t * t).sqrt();
                    let s = c * t;
                    for i in 0..w.nrows() {
                        let wp = w[(i, p)];
                        let wq = w[(i, q)];
                        w[(i, p)] = c * wp - s * wq;
                        w[(i, q)] = s * wp + c * wq;
                    }
                }
            }
            if off < 1e-15 {
                break;
            }
        }
        let mut s: Vec<f64> = (0..cols).map(|j| w.column(j).norm()).collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    fn lcg_matrix(n: usize, m: usize, seed: u64) -> DMatrix<f64> {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        DMatrix::from_fn(n, m, |_, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        })
    }

    #[test]
    fn diagonal_case() {
        let a = diag(&[3.0, 1.0]);
        let t = truncated_svd(&a, 1, 1e-8).unwrap();
        assert!((t.sigma[0] - 3.0).abs() < 1e-12);
        let rec = t.reconstruct();
        assert!(max_abs(&(rec - diag(&[3.0, 0.0]))) < 1e-12);
    }

    #[test]
    fn exact_rank_one() {
        let u = DVector::from_row_slice(&[1.0, -2.0, 0.5, 3.0]);
        let v = DVector::from_row_slice(&[0.3, 1.0, -1.0]);
        let a = &u * v.transpose();
        let t = truncated_svd(&a, 1, 1e-8).unwrap();
        assert!(max_abs(&(t.reconstruct() - a)) < 1e-10);
    }

    #[test]
    fn reconstruction_error_equals_tail_from_jacobi_oracle() {
        let a = lcg_matrix(8, 6, 42);
        let oracle = jacobi_singular_values(&a);
        let tail = (oracle[3].powi(2) + oracle[4].powi(2) + oracle[5].powi(2)).sqrt();
        let t = truncated_svd(&a, 3, 1e-8).unwrap();
        let err = (&a - t.reconstruct()).norm();
        assert!((err - tail).abs() < 1e-8, "{err} vs {tail}");
        for (s, o) in t.sigma.iter().zip(&oracle) {
            assert!((s - o).abs() < 1e-10);
        }
    }

    #[test]
    fn rank_out_of_range() {
        let a = lcg_matrix(3, 4, 1);
        assert!(matches!(truncated_svd(&a, 4, 1e-8), Err(Error::RankOutOfRange { .. })));
        assert!(matches!(truncated_svd(&a, 0, 1e-8), Err(Error::RankOutOfRange { .. })));
    }

    #[test]
    fn randomized_path_matches_dense() {
        // Low rank plus small noise, large enough to take the randomized branch.
        let n = 600;
        let left = lcg_matrix(n, 3, 7);
        let right = lcg_matrix(3, 530, 8);
        let noise = lcg_matrix(n, 530, 9) * 1e-3;
        let a = &left * &right * 10.0 + noise;
        let fast = truncated_svd(&a, 3, 1e-6).unwrap();
        let exact = full_svd(&a).unwrap();
        for j in 0..3 {
            assert!((fast.sigma[j] - exact.sigma[j]).abs() < 1e-6 * exact.sigma[0]);
        }
        assert!(max_orthonormality_error(&fast.u) < 1e-8);
        assert!(max_orthonormality_error(&fast.v) < 1e-8);
    }

    #[test]
    fn soft_threshold_examples() {
        let a = lcg_matrix(5, 4, 3);
        assert!(max_abs(&(soft_threshold_svd(&a, 0.0).unwrap() - &a)) < 1e-10);
        let d = soft_threshold_svd(&diag(&[3.0, 1.0]), 2.0).unwrap();
        assert!(max_abs(&(d - diag(&[1.0, 0.0]))) < 1e-12);
        let r = lcg_matrix(6, 6, 5);
        let oracle = jacobi_singular_values(&r);
        let out = soft_threshold(&r, oracle[1]).unwrap();
        let s = jacobi_singular_values(&out.matrix);
        assert!((s[0] - (oracle[0] - oracle[1])).abs() < 1e-10);
        assert!(s[1..].iter().all(|v| *v < 1e-10));
        assert!(soft_threshold(&r, -1.0).is_err());
    }

    #[test]
    fn numerical_rank_counts() {
        assert_eq!(numerical_rank(&[10.0, 1.0, 1e-7], 1e-6), 2);
        assert_eq!(numerical_rank(&[], 1e-6), 0);
        assert_eq!(numerical_rank(&[0.0, 0.0], 1e-6), 0);
    }

    fn matrix_strategy() -> impl Strategy<Value = (DMatrix<f64>, usize, u64)> {
        (2usize..=12, 2usize..=12, any::<u64>()).prop_flat_map(|(n, m, seed)| {
            (Just(lcg_matrix(n, m, seed)), 1..=n.min(m), Just(seed))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn projection_is_optimal((a, r, seed) in matrix_strategy()) {
            let t = truncated_svd(&a, r, 1e-8).unwrap();
            let best = (&a - t.reconstruct()).norm();
            for trial in 0..100u64 {
                let b = lcg_matrix(a.nrows(), r, seed ^ (trial + 1)) * lcg_matrix(r, a.ncols(), seed.rotate_left(7) ^ trial);
                prop_assert!(best <= (&a - b).norm() + 1e-10);
            }
        }

        #[test]
        fn factors_are_orthonormal((a, r, _seed) in matrix_strategy()) {
            let t = truncated_svd(&a, r, 1e-8).unwrap();
            prop_assert!(max_orthonormality_error(&t.u) <= 1e-8);
            prop_assert!(max_orthonormality_error(&t.v) <= 1e-8);
            prop_assert!(t.sigma.windows(2).all(|w| w[0] >= w[1]));
            prop_assert!(t.sigma.iter().all(|s| *s >= 0.0));
        }

        #[test]
        fn soft_threshold_is_non_expansive(n in 2usize..=8, m in 2usize..=8, s1: u64, s2: u64, tau in 0.0f64..2.0) {
            let a = lcg_matrix(n, m, s1);
            let b = lcg_matrix(n, m, s2);
            let sa = soft_threshold_svd(&a, tau).unwrap();
            let sb = soft_threshold_svd(&b, tau).unwrap();
            prop_assert!((sa - sb).norm() <= (&a - &b).norm() + 1e-10);
        }
    }
}
