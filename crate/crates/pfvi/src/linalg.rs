//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Default refusal threshold for dense oracle paths, in total parameters.
pub const DENSE_GUARD_DEFAULT: usize = 2_000;

/// Error out when a dense path would materialize more than `guard` rows.
pub fn check_guard(dim: usize, guard: usize) -> Result<()> {
    if dim > guard {
        Err(Error::DimensionGuard { dim, guard })
    } else {
        Ok(())
    }
}

/// Force exact symmetry; a cheap companion to products like `LᵀML`.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Cholesky of an SPD matrix, with a named error on failure.
pub fn spd_cholesky(m: DMatrix<f64>, block: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or_else(|| Error::Singular {
        block: block.to_string(),
        detail: "Cholesky factorization failed (matrix not positive definite)".to_string(),
    })
}

/// Eigenvalues of a symmetric matrix, sorted descending.
pub fn sym_eigenvalues_desc(m: &DMatrix<f64>) -> Vec<f64> {
    let mut ev: Vec<f64> = m.clone().symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| b.partial_cmp(a).unwrap());
    ev
}

/// Full symmetric eigendecomposition with pairs sorted descending by value.
pub fn sym_eigen_desc(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = m.clone().symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// vᵀ M v.
pub fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Unbiased sample covariance of row-observations.
pub fn sample_covariance(rows: &[DVector<f64>]) -> Result<DMatrix<f64>> {
    let s = rows.len();
    if s < 2 {
        return Err(Error::SampleSize(format!(
            "need at least 2 samples for a covariance, got {s}"
        )));
    }
    let p = rows[0].len();
    let mut mean = DVector::zeros(p);
    for r in rows {
        mean += r;
    }
    mean /= s as f64;
    let mut cov = DMatrix::zeros(p, p);
    for r in rows {
        let d = r - &mean;
        cov.syger(1.0, &d, &d, 1.0);
    }
    // syger fills the lower triangle; mirror it.
    for i in 0..p {
        for j in (i + 1)..p {
            cov[(i, j)] = cov[(j, i)];
        }
    }
    cov /= (s - 1) as f64;
    Ok(cov)
}

/// Column means of row-observations.
pub fn sample_mean(rows: &[DVector<f64>]) -> DVector<f64> {
    let p = rows[0].len();
    let mut mean = DVector::zeros(p);
    for r in rows {
        mean += r;
    }
    mean / rows.len() as f64
}

/// Standard normal vector.
pub fn standard_normal_vector<R: Rng>(dim: usize, rng: &mut R) -> DVector<f64> {
    DVector::from_fn(dim, |_, _| rng.sample(StandardNormal))
}

/// Draw from N(mean, precision⁻¹) given the Cholesky of the precision.
///
/// With precision = LLᵀ, mean + L⁻ᵀz has the right covariance.
pub fn sample_gaussian_from_precision_chol<R: Rng>(
    mean: &DVector<f64>,
    chol: &Cholesky<f64, Dyn>,
    rng: &mut R,
) -> DVector<f64> {
    let z = standard_normal_vector(mean.len(), rng);
    let mut x = z;
    chol.l().transpose().solve_upper_triangular_mut(&mut x);
    mean + x
}

/// Maximum absolute entrywise difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).amax()
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs().max(1e-12)
}

/// Random SPD matrix with eigenvalues in [lo, hi]; test utility used by
/// several modules' oracles.
pub fn random_spd<R: Rng>(dim: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
    assert!(lo > 0.0 && hi >= lo);
    let a = DMatrix::from_fn(dim, dim, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = a.qr();
    let q = qr.q();
    let evs = DVector::from_fn(dim, |_, _| lo + (hi - lo) * rng.gen::<f64>());
    let mut m = &q * DMatrix::from_diagonal(&evs) * q.transpose();
    symmetrize(&mut m);
    m
}
