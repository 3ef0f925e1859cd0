//! Accuracy metrics: the analytic uncertainty quantification fraction, its
//! split-sample estimator for sampled targets, and a total-variation
//! accuracy score for scalar marginals.
//!
//! UQF(q‖π) = inf_v var_q(θᵀv)/var_π(θᵀv) = 1/λ_max(cov_π·cov_q⁻¹): the
//! worst-case variance underestimation over all linear functionals; 1 means
//! none.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigen_desc, sym_eigenvalues_desc, symmetrize};
use crate::rng::rng_from_seed;
use rand::seq::SliceRandom;

/// How a UQF value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UqfMethod {
    Analytic,
    SplitSample,
}

/// A UQF estimate with its provenance.
#[derive(Debug, Clone, Serialize)]
pub struct UqfEstimate {
    pub value: f64,
    pub method: UqfMethod,
    /// Per-fold estimates (split-sample only).
    pub fold_values: Vec<f64>,
    /// Number of eigenvectors retained per fold.
    pub eigvec_count: usize,
}

fn cholesky_or_domain(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::Domain(format!("{what} must be square")));
    }
    if (m - m.transpose()).amax() > 1e-8 * m.amax().max(1.0) {
        return Err(Error::Domain(format!("{what} must be symmetric")));
    }
    m.clone()
        .cholesky()
        .ok_or_else(|| Error::Domain(format!("{what} must be positive definite")))
}

/// UQF from exact covariances: 1/λ_max(cov_π · q_precision), computed on
/// the symmetric similarity Lᵀ·cov_π·L with q_precision = LLᵀ.
pub fn uqf_analytic(cov_pi: &DMatrix<f64>, q_precision: &DMatrix<f64>) -> Result<f64> {
    if cov_pi.nrows() != q_precision.nrows() {
        return Err(Error::Domain(
            "covariance and precision must have the same dimension".into(),
        ));
    }
    cholesky_or_domain(cov_pi, "target covariance")?;
    let chol = cholesky_or_domain(q_precision, "q precision")?;
    let l = chol.l();
    let mut sym = l.transpose() * cov_pi * &l;
    symmetrize(&mut sym);
    let lambda_max = sym_eigenvalues_desc(&sym)[0];
    Ok(1.0 / lambda_max)
}

/// Split-sample UQF: per fold, learn the top eigenvectors of
/// ĉov_π·cov_q⁻¹ on the training folds, then estimate the UQF on the
/// held-out fold inside that subspace, where cov_q is projected exactly.
///
/// Fold assignment is by contiguous blocks of the shuffled sample stream
/// (the seed drives the shuffle).
pub fn uqf_split_sample(
    pi_samples: &DMatrix<f64>,
    q_precision: &DMatrix<f64>,
    folds: usize,
    top: usize,
    rng_seed: u64,
) -> Result<UqfEstimate> {
    let s = pi_samples.nrows();
    let p = pi_samples.ncols();
    if q_precision.nrows() != p {
        return Err(Error::Domain(
            "q precision dimension must match sample columns".into(),
        ));
    }
    if folds < 2 {
        return Err(Error::SampleSize("need at least 2 folds".into()));
    }
    if s < folds * (top.min(p) + 2) {
        return Err(Error::SampleSize(format!(
            "need at least folds·(top+2) = {} samples, got {s}",
            folds * (top.min(p) + 2)
        )));
    }
    let r = top.min(p);
    let q_chol = cholesky_or_domain(q_precision, "q precision")?;
    let l = q_chol.l();

    let mut order: Vec<usize> = (0..s).collect();
    let mut rng = rng_from_seed(rng_seed);
    order.shuffle(&mut rng);

    let fold_of = |pos: usize| -> usize { (pos * folds / s).min(folds - 1) };

    let mut fold_values = Vec::with_capacity(folds);
    for fold in 0..folds {
        let train: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| fold_of(*pos) != fold)
            .map(|(_, &i)| i)
            .collect();
        let held: Vec<usize> = order
            .iter()
            .enumerate()
            .filter(|(pos, _)| fold_of(*pos) == fold)
            .map(|(_, &i)| i)
            .collect();

        let cov_train = sample_cov_rows(pi_samples, &train)?;
        // Eigenvectors of ĉov·Q̂ via the symmetric similarity Lᵀ ĉov L:
        // if (Lᵀ ĉov L)u = λu then V = L⁻ᵀu is an eigenvector of ĉov·Q̂.
        let mut sym = l.transpose() * &cov_train * &l;
        symmetrize(&mut sym);
        let (_, vectors) = sym_eigen_desc(&sym);
        let u_r = vectors.columns(0, r).into_owned();
        let mut v = u_r;
        l.transpose().solve_upper_triangular_mut(&mut v);

        // Held-out estimate of cov_π(Vᵀθ); exact cov_q(Vᵀθ) = Vᵀ Q̂⁻¹ V.
        let projected: Vec<DVector<f64>> = held
            .iter()
            .map(|&i| v.transpose() * pi_samples.row(i).transpose())
            .collect();
        let cov_pi_proj = crate::linalg::sample_covariance(&projected)?;
        let qinv_v = q_chol.solve(&v);
        let mut cov_q_proj = v.transpose() * qinv_v;
        symmetrize(&mut cov_q_proj);
        fold_values.push(uqf_analytic(
            &cov_pi_proj,
            &cov_q_proj
                .try_inverse()
                .ok_or_else(|| Error::Domain("projected q covariance is singular".into()))?,
        )?);
    }
    let value = fold_values.iter().sum::<f64>() / folds as f64;
    Ok(UqfEstimate {
        value,
        method: UqfMethod::SplitSample,
        fold_values,
        eigvec_count: r,
    })
}

fn sample_cov_rows(samples: &DMatrix<f64>, rows: &[usize]) -> Result<DMatrix<f64>> {
    let picked: Vec<DVector<f64>> = rows
        .iter()
        .map(|&i| samples.row(i).transpose())
        .collect();
    crate::linalg::sample_covariance(&picked)
}

/// Silverman's bandwidth: 0.9·min(sd, IQR/1.34)·S^{-1/5}.
fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    let s = samples.len();
    if s < 2 {
        return Err(Error::SampleSize("need at least 2 samples for a KDE".into()));
    }
    let mean = samples.iter().sum::<f64>() / s as f64;
    let sd = (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (s as f64 - 1.0)).sqrt();
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let quantile = |q: f64| -> f64 {
        let idx = q * (s as f64 - 1.0);
        let lo = idx.floor() as usize;
        let hi = idx.ceil() as usize;
        let w = idx - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    };
    let iqr = quantile(0.75) - quantile(0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    if spread <= 0.0 {
        return Err(Error::DegenerateDensity(
            "samples are (near-)constant; no usable bandwidth".into(),
        ));
    }
    Ok(0.9 * spread * (s as f64).powf(-0.2))
}

const TV_GRID_BINS: usize = 401;

/// Binned kernel density estimate on a fixed grid: samples are linearly
/// binned, then the bin masses are smoothed with a Gaussian kernel.
fn binned_kde(samples: &[f64], grid_lo: f64, grid_step: f64, bandwidth: f64) -> Vec<f64> {
    let mut mass = vec![0.0; TV_GRID_BINS];
    let s = samples.len() as f64;
    for &x in samples {
        let pos = (x - grid_lo) / grid_step;
        let lo = pos.floor();
        let idx = lo as isize;
        let w = pos - lo;
        if idx >= 0 && (idx as usize) < TV_GRID_BINS {
            mass[idx as usize] += (1.0 - w) / s;
        }
        if idx + 1 >= 0 && ((idx + 1) as usize) < TV_GRID_BINS {
            mass[(idx + 1) as usize] += w / s;
        }
    }
    // Kernel weights by grid offset.
    let half_width = (8.0 * bandwidth / grid_step).ceil() as usize;
    let norm = 1.0 / (bandwidth * (2.0 * std::f64::consts::PI).sqrt());
    let kernel: Vec<f64> = (0..=half_width)
        .map(|d| {
            let z = d as f64 * grid_step / bandwidth;
            norm * (-0.5 * z * z).exp()
        })
        .collect();
    let mut density = vec![0.0; TV_GRID_BINS];
    for (b, &m) in mass.iter().enumerate() {
        if m == 0.0 {
            continue;
        }
        let lo = b.saturating_sub(half_width);
        let hi = (b + half_width).min(TV_GRID_BINS - 1);
        for (j, dens) in density.iter_mut().enumerate().take(hi + 1).skip(lo) {
            let d = b.abs_diff(j);
            *dens += m * kernel[d];
        }
    }
    density
}

/// TV-based accuracy 1 − ½∫|q̂ − π̂| between two scalar sample sets, with
/// binned Gaussian KDEs on a common 401-bin grid spanning the pooled range
/// ±3 pooled bandwidths and trapezoid integration. Clipped to [0, 1].
pub fn tv_accuracy(samples_a: &[f64], samples_b: &[f64]) -> Result<f64> {
    if samples_a.is_empty() || samples_b.is_empty() {
        return Err(Error::SampleSize("both sample sets must be nonempty".into()));
    }
    let h_a = silverman_bandwidth(samples_a)?;
    let h_b = silverman_bandwidth(samples_b)?;
    let h_pool = h_a.max(h_b);
    let min = samples_a
        .iter()
        .chain(samples_b)
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = samples_a
        .iter()
        .chain(samples_b)
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let lo = min - 3.0 * h_pool;
    let hi = max + 3.0 * h_pool;
    let step = (hi - lo) / (TV_GRID_BINS as f64 - 1.0);

    let dens_a = binned_kde(samples_a, lo, step, h_a);
    let dens_b = binned_kde(samples_b, lo, step, h_b);
    let mut integral = 0.0;
    for i in 1..TV_GRID_BINS {
        let f0 = (dens_a[i - 1] - dens_b[i - 1]).abs();
        let f1 = (dens_a[i] - dens_b[i]).abs();
        integral += 0.5 * (f0 + f1) * step;
    }
    Ok((1.0 - 0.5 * integral).clamp(0.0, 1.0))
}

/// Metrics report: UQF plus per-quantity TV accuracy scores.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub uqf: UqfEstimate,
    pub tv: Vec<TvScore>,
}

#[derive(Debug, Clone, Serialize)]
pub struct TvScore {
    pub quantity: String,
    pub accuracy: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::random_spd;
    use crate::rng::rng_from_seed;
    use proptest::prelude::*;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn identical_laws_have_unit_uqf() {
        let id = DMatrix::identity(3, 3);
        assert!((uqf_analytic(&id, &id).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn two_dim_mean_field_optimum() {
        // cov_π = [[1, .5], [.5, 1]]; the mean-field optimum has precision
        // diag(4/3, 4/3), i.e. cov_q = diag(0.75, 0.75): UQF = 0.5.
        let cov_pi = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.5, 1.0]);
        let q_prec = DMatrix::from_diagonal(&DVector::from_vec(vec![4.0 / 3.0, 4.0 / 3.0]));
        let uqf = uqf_analytic(&cov_pi, &q_prec).unwrap();
        assert!((uqf - 0.5).abs() < 1e-12, "{uqf}");
    }

    #[test]
    fn matches_two_block_modulus_identity() {
        // For a 2×2-block SPD M with the mean-field q (block-diagonal
        // precision), UQF = 1 − ρ(M₁₁⁻¹M₁₂M₂₂⁻¹M₂₁)^½.
        for seed in [3u64, 7, 11] {
            let mut rng = rng_from_seed(seed);
            let d1 = 3;
            let d2 = 4;
            let m = random_spd(d1 + d2, 0.4, 2.5, &mut rng);
            let m11 = m.view((0, 0), (d1, d1)).into_owned();
            let m12 = m.view((0, d1), (d1, d2)).into_owned();
            let m22 = m.view((d1, d1), (d2, d2)).into_owned();
            let mut q_prec = DMatrix::zeros(d1 + d2, d1 + d2);
            q_prec.view_mut((0, 0), (d1, d1)).copy_from(&m11);
            q_prec.view_mut((d1, d1), (d2, d2)).copy_from(&m22);

            let cov_pi = m.clone().try_inverse().unwrap();
            let uqf = uqf_analytic(&cov_pi, &q_prec).unwrap();

            let prod = m11.try_inverse().unwrap()
                * &m12
                * m22.try_inverse().unwrap()
                * m12.transpose();
            let rho = prod
                .complex_eigenvalues()
                .iter()
                .map(|z| z.norm())
                .fold(0.0, f64::max);
            let oracle = 1.0 - rho.sqrt();
            assert!((uqf - oracle).abs() < 1e-10, "seed {seed}: {uqf} vs {oracle}");
        }
    }

    #[test]
    fn mean_field_uqf_is_at_most_one() {
        for seed in 0..10u64 {
            let mut rng = rng_from_seed(100 + seed);
            let q = random_spd(6, 0.3, 4.0, &mut rng);
            let mut q_mf = DMatrix::zeros(6, 6);
            // blocks of sizes 2, 1, 3
            for (off, len) in [(0usize, 2usize), (2, 1), (3, 3)] {
                q_mf.view_mut((off, off), (len, len))
                    .copy_from(&q.view((off, off), (len, len)).into_owned());
            }
            let cov_pi = q.try_inverse().unwrap();
            let uqf = uqf_analytic(&cov_pi, &q_mf).unwrap();
            assert!(uqf <= 1.0 + 1e-10, "seed {seed}: {uqf}");
            assert!(uqf > 0.0);
        }
    }

    #[test]
    fn non_spd_input_is_a_domain_error() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        let id = DMatrix::identity(2, 2);
        assert!(matches!(uqf_analytic(&bad, &id), Err(Error::Domain(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn self_uqf_is_one(seed in 0u64..500) {
            let mut rng = rng_from_seed(seed);
            let cov = random_spd(4, 0.2, 3.0, &mut rng);
            let prec = cov.clone().try_inverse().unwrap();
            let uqf = uqf_analytic(&cov, &prec).unwrap();
            prop_assert!((uqf - 1.0).abs() < 1e-8);
        }

        #[test]
        fn matched_scaling_invariance(seed in 0u64..500, c in 0.1f64..10.0) {
            let mut rng = rng_from_seed(seed);
            let cov = random_spd(3, 0.2, 3.0, &mut rng);
            let qp = random_spd(3, 0.2, 3.0, &mut rng);
            let base = uqf_analytic(&cov, &qp).unwrap();
            // Scaling cov_π by c and cov_q by c (precision by 1/c) is a
            // change of units: UQF is invariant.
            let scaled = uqf_analytic(&(&cov * c), &(&qp / c)).unwrap();
            prop_assert!((base - scaled).abs() < 1e-9 * base.abs().max(1.0));
        }
    }

    fn gaussian_samples(
        cov: &DMatrix<f64>,
        s: usize,
        seed: u64,
    ) -> DMatrix<f64> {
        let mut rng = rng_from_seed(seed);
        let chol = cov.clone().cholesky().unwrap();
        let p = cov.nrows();
        let mut out = DMatrix::zeros(s, p);
        for i in 0..s {
            let z = crate::linalg::standard_normal_vector(p, &mut rng);
            let x = chol.l() * z;
            for j in 0..p {
                out[(i, j)] = x[j];
            }
        }
        out
    }

    #[test]
    fn split_sample_self_comparison_is_near_one() {
        let mut rng = rng_from_seed(42);
        let cov = random_spd(6, 0.5, 2.0, &mut rng);
        let prec = cov.clone().try_inverse().unwrap();
        let samples = gaussian_samples(&cov, 30_000, 7);
        let est = uqf_split_sample(&samples, &prec, 5, 50, 1).unwrap();
        assert_eq!(est.eigvec_count, 6);
        assert!((est.value - 1.0).abs() < 0.05, "{}", est.value);
    }

    #[test]
    fn split_sample_matches_analytic_on_known_gaussian() {
        let mut rng = rng_from_seed(9);
        let q = random_spd(10, 0.4, 2.5, &mut rng);
        let cov_pi = q.clone().try_inverse().unwrap();
        let mut q_mf = DMatrix::zeros(10, 10);
        for (off, len) in [(0usize, 3usize), (3, 3), (6, 4)] {
            q_mf.view_mut((off, off), (len, len))
                .copy_from(&q.view((off, off), (len, len)).into_owned());
        }
        let analytic = uqf_analytic(&cov_pi, &q_mf).unwrap();
        let samples = gaussian_samples(&cov_pi, 50_000, 11);
        let est = uqf_split_sample(&samples, &q_mf, 5, 50, 3).unwrap();
        assert!(
            (est.value - analytic).abs() < 0.05,
            "estimate {} vs analytic {analytic}",
            est.value
        );
    }

    #[test]
    fn split_sample_errors_on_short_input() {
        let samples = DMatrix::zeros(10, 4);
        let prec = DMatrix::identity(4, 4);
        assert!(matches!(
            uqf_split_sample(&samples, &prec, 5, 50, 1),
            Err(Error::SampleSize(_))
        ));
    }

    #[test]
    fn tv_accuracy_examples() {
        let mut rng = rng_from_seed(5);
        let n01 = Normal::new(0.0, 1.0).unwrap();
        let a: Vec<f64> = (0..40_000).map(|_| n01.sample(&mut rng)).collect();

        // Self-comparison.
        let self_score = tv_accuracy(&a, &a).unwrap();
        assert!(self_score >= 0.99, "{self_score}");

        // Disjoint supports.
        let far: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        assert!(tv_accuracy(&a, &far).unwrap() <= 0.01);

        // N(0,1) vs N(0,4): TV ≈ 0.3095, accuracy ≈ 0.6905.
        let n02 = Normal::new(0.0, 2.0).unwrap();
        let b: Vec<f64> = (0..100_000).map(|_| n02.sample(&mut rng)).collect();
        let a_big: Vec<f64> = (0..100_000).map(|_| n01.sample(&mut rng)).collect();
        let score = tv_accuracy(&a_big, &b).unwrap();
        assert!((score - 0.690).abs() < 0.02, "{score}");

        // Symmetry on a shared grid.
        let sym_gap = (tv_accuracy(&a, &b[..40_000]).unwrap()
            - tv_accuracy(&b[..40_000], &a).unwrap())
        .abs();
        assert!(sym_gap < 1e-6, "{sym_gap}");
    }

    #[test]
    fn constant_samples_are_degenerate() {
        let c = vec![2.0; 100];
        let x = vec![0.0, 1.0, 2.0];
        assert!(matches!(
            tv_accuracy(&c, &x),
            Err(Error::DegenerateDensity(_))
        ));
    }
}
