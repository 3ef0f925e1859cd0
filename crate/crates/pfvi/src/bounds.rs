//! Computable design diagnostics for two-factor random-intercept models:
//! weighted co-occurrence counts, the balancedness check, the fully
//! factorized UQF upper bound, the exact balanced-design UQF of the
//! collapsed-fixed-effects family via the co-occurrence spectrum, and the
//! random-design asymptotic lower bound.
//!
//! The co-occurrence matrix N₁₂ is the adjacency of a weighted bipartite
//! graph on the two factors' levels; λ_aux, the second-largest-modulus
//! eigenvalue of the stochastic product S₁₂S₂₁, measures its connectivity
//! (1 − λ_aux^½ is the normalized-Laplacian spectral gap).

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{sym_eigenvalues_desc, symmetrize, DENSE_GUARD_DEFAULT};
use crate::model::MixedModelData;
use crate::surrogate::GaussianSurrogate;

/// Weighted level and pair counts of a random-intercept design.
#[derive(Debug, Clone)]
pub struct DesignCounts {
    /// Per ordered factor pair (k, ℓ), k < ℓ: the G_k×G_ℓ matrix of
    /// n_{g,h}^{(k,ℓ)} = Σ_i D²_{ii} m_{i,k,g} m_{i,ℓ,h}.
    pub pair_counts: Vec<((usize, usize), DMatrix<f64>)>,
    /// Per factor: n_g^{(k)}.
    pub level_counts: Vec<DVector<f64>>,
    /// D̄ = n⁻¹ Σ_i D²_{ii}.
    pub d_bar: f64,
    pub n: usize,
}

impl DesignCounts {
    pub fn num_factors(&self) -> usize {
        self.level_counts.len()
    }

    pub fn pair(&self, k: usize, l: usize) -> Option<&DMatrix<f64>> {
        self.pair_counts
            .iter()
            .find(|((a, b), _)| (*a, *b) == (k, l))
            .map(|(_, m)| m)
    }
}

/// Exact weighted counts from a surrogate's working weights. Requires a
/// random-intercept model (every D_k = 1).
pub fn weighted_counts(s: &GaussianSurrogate, data: &MixedModelData) -> Result<DesignCounts> {
    for f in &data.factors {
        if f.effect_dim != 1 {
            return Err(Error::UnsupportedRestriction(format!(
                "weighted counts are defined for random intercepts only; factor `{}` has D_k = {}",
                f.name, f.effect_dim
            )));
        }
    }
    let k = data.num_factors();
    let n = data.n;
    let d2: Vec<f64> = (0..n).map(|i| s.d[i] * s.d[i]).collect();
    let mut level_counts: Vec<DVector<f64>> = data
        .factors
        .iter()
        .map(|f| DVector::zeros(f.levels))
        .collect();
    for (kf, counts) in level_counts.iter_mut().enumerate() {
        for i in 0..n {
            counts[data.memberships[kf][i]] += d2[i];
        }
    }
    let mut pair_counts = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            let mut m = DMatrix::zeros(data.factors[a].levels, data.factors[b].levels);
            for i in 0..n {
                m[(data.memberships[a][i], data.memberships[b][i])] += d2[i];
            }
            pair_counts.push(((a, b), m));
        }
    }
    let d_bar = d2.iter().sum::<f64>() / n as f64;
    Ok(DesignCounts {
        pair_counts,
        level_counts,
        d_bar,
        n,
    })
}

/// Counts with unit weights straight from a design; used before any fit.
pub fn raw_counts(data: &MixedModelData) -> Result<DesignCounts> {
    for f in &data.factors {
        if f.effect_dim != 1 {
            return Err(Error::UnsupportedRestriction(format!(
                "raw counts are defined for random intercepts only; factor `{}` has D_k = {}",
                f.name, f.effect_dim
            )));
        }
    }
    let k = data.num_factors();
    let n = data.n;
    let mut level_counts: Vec<DVector<f64>> = data
        .factors
        .iter()
        .map(|f| DVector::zeros(f.levels))
        .collect();
    for (kf, counts) in level_counts.iter_mut().enumerate() {
        for i in 0..n {
            counts[data.memberships[kf][i]] += 1.0;
        }
    }
    let mut pair_counts = Vec::new();
    for a in 0..k {
        for b in (a + 1)..k {
            let mut m = DMatrix::zeros(data.factors[a].levels, data.factors[b].levels);
            for i in 0..n {
                m[(data.memberships[a][i], data.memberships[b][i])] += 1.0;
            }
            pair_counts.push(((a, b), m));
        }
    }
    Ok(DesignCounts {
        pair_counts,
        level_counts,
        d_bar: 1.0,
        n,
    })
}

/// Balancedness: within each factor every level carries the same weighted
/// count, to a relative tolerance. Defined for K = 2.
pub fn is_balanced(counts: &DesignCounts, tol: f64) -> Result<bool> {
    if counts.num_factors() != 2 {
        return Err(Error::UnsupportedRestriction(format!(
            "balancedness is defined for K = 2, got K = {}",
            counts.num_factors()
        )));
    }
    for lc in &counts.level_counts {
        let mean = lc.sum() / lc.len() as f64;
        let max_dev = lc.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
        if max_dev > tol * mean {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Upper bound on the fully factorized UQF:
/// 1 − max_k √(nD̄ / (G_k T_k + nD̄)).
pub fn ff_bound(counts: &DesignCounts, t: &[f64], n: usize) -> Result<f64> {
    if t.len() != counts.num_factors() {
        return Err(Error::Validation(
            "need one T_k per factor for the bound".into(),
        ));
    }
    let nd = n as f64 * counts.d_bar;
    let mut max_ratio: f64 = 0.0;
    for (k, &tk) in t.iter().enumerate() {
        let gk = counts.level_counts[k].len() as f64;
        max_ratio = max_ratio.max((nd / (gk * tk + nd)).sqrt());
    }
    Ok(1.0 - max_ratio)
}

/// λ_aux: the second-largest-modulus eigenvalue of S₁₂S₂₁, where S_{kℓ}
/// has entries n_{g,h}^{(k,ℓ)}/n_g^{(k)}.
///
/// S₁₂S₂₁ is similar to the symmetric PSD matrix
/// D₁^{-1/2} N₁₂ D₂^{-1} N₁₂ᵀ D₁^{-1/2}, so its spectrum is real in [0, 1];
/// a full eigensolve is used below the guard dimension and a deflated
/// power iteration above it.
pub fn lambda_aux(counts: &DesignCounts) -> Result<f64> {
    if counts.num_factors() != 2 {
        return Err(Error::UnsupportedRestriction(format!(
            "λ_aux is defined for K = 2, got K = {}",
            counts.num_factors()
        )));
    }
    let n12 = counts.pair(0, 1).unwrap();
    let d1 = &counts.level_counts[0];
    let d2 = &counts.level_counts[1];
    if d1.iter().any(|&v| v <= 0.0) || d2.iter().any(|&v| v <= 0.0) {
        return Err(Error::Domain(
            "every level needs positive weighted count for the stochastic matrices".into(),
        ));
    }
    let g1 = d1.len();
    let g2 = d2.len();
    // Ssym = D₁^{-1/2} N₁₂ D₂^{-1} N₁₂ᵀ D₁^{-1/2}
    let mut b = n12.clone();
    for r in 0..g1 {
        for c in 0..g2 {
            b[(r, c)] /= d1[r].sqrt() * d2[c].sqrt();
        }
    }
    let mut sym = &b * b.transpose();
    symmetrize(&mut sym);
    if g1 <= DENSE_GUARD_DEFAULT {
        let ev = sym_eigenvalues_desc(&sym);
        Ok(ev.get(1).copied().unwrap_or(0.0).clamp(0.0, 1.0))
    } else {
        // Deflate the known top eigenpair (1, D₁^{1/2}·1) and power-iterate.
        let mut top = DVector::from_fn(g1, |i, _| d1[i].sqrt());
        top /= top.norm();
        let mut v = DVector::from_fn(g1, |i, _| ((i * 2654435761) % 97) as f64 / 97.0 - 0.5);
        v -= &top * top.dot(&v);
        v /= v.norm();
        let mut lambda = 0.0;
        for _ in 0..10_000 {
            let mut w = &sym * &v;
            w -= &top * top.dot(&w);
            let norm = w.norm();
            if norm < 1e-300 {
                return Ok(0.0);
            }
            w /= norm;
            let new_lambda = w.dot(&(&sym * &w));
            let done = (new_lambda - lambda).abs() < 1e-12 * new_lambda.max(1e-12);
            lambda = new_lambda;
            v = w;
            if done {
                break;
            }
        }
        Ok(lambda.clamp(0.0, 1.0))
    }
}

/// Exact UQF of the collapsed-fixed-effects family on a balanced K = 2
/// random-intercept design: 1 − (Π_k [nD̄/(G_kT_k + nD̄)]^½)·λ_aux^½.
pub fn pf_uqf_balanced(counts: &DesignCounts, t: &[f64], n: usize) -> Result<PfExact> {
    if counts.num_factors() != 2 || t.len() != 2 {
        return Err(Error::UnsupportedRestriction(
            "the exact collapsed-family UQF is defined for K = 2".into(),
        ));
    }
    if !is_balanced(counts, 1e-9)? {
        return Err(Error::UnsupportedRestriction(
            "the exact formula requires a balanced design".into(),
        ));
    }
    let lam = lambda_aux(counts)?;
    let nd = n as f64 * counts.d_bar;
    let mut prod = 1.0;
    for (k, &tk) in t.iter().enumerate() {
        let gk = counts.level_counts[k].len() as f64;
        prod *= (nd / (gk * tk + nd)).sqrt();
    }
    Ok(PfExact {
        uqf_exact: 1.0 - prod * lam.sqrt(),
        lambda_aux: lam,
    })
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct PfExact {
    pub uqf_exact: f64,
    pub lambda_aux: f64,
}

/// Asymptotic lower bound on the collapsed-fixed-effects UQF for uniform
/// biregular designs: 1 − ((G₁/n)^½ + (G₂/n)^½)^½.
pub fn rg_bound(n: usize, g1: usize, g2: usize) -> f64 {
    let nf = n as f64;
    1.0 - ((g1 as f64 / nf).sqrt() + (g2 as f64 / nf).sqrt()).sqrt()
}

/// Bundle of everything the `bounds` command reports.
#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub n: usize,
    pub levels: Vec<usize>,
    pub d_bar: f64,
    pub t: Vec<f64>,
    pub balanced: bool,
    pub ff_upper: f64,
    pub lambda_aux: Option<f64>,
    pub laplacian_gap: Option<f64>,
    pub pf_exact: Option<f64>,
    pub rg_lower: Option<f64>,
}

/// Assemble the report for a K = 2 random-intercept design.
pub fn bounds_report(counts: &DesignCounts, t: &[f64], n: usize) -> Result<BoundsReport> {
    let balanced = is_balanced(counts, 1e-9)?;
    let ff_upper = ff_bound(counts, t, n)?;
    let lam = lambda_aux(counts).ok();
    let pf_exact = if balanced {
        Some(pf_uqf_balanced(counts, t, n)?.uqf_exact)
    } else {
        None
    };
    let g1 = counts.level_counts[0].len();
    let g2 = counts.level_counts[1].len();
    let rg_lower = if n.is_multiple_of(g1) && n.is_multiple_of(g2) && balanced {
        Some(rg_bound(n, g1, g2))
    } else {
        None
    };
    Ok(BoundsReport {
        n,
        levels: counts.level_counts.iter().map(|lc| lc.len()).collect(),
        d_bar: counts.d_bar,
        t: t.to_vec(),
        balanced,
        ff_upper,
        lambda_aux: lam,
        laplacian_gap: lam.map(|l| 1.0 - l.sqrt()),
        pf_exact,
        rg_lower,
    })
}

/// Scalar T_k values from a surrogate (random-intercept factors only).
pub fn scalar_penalties(s: &GaussianSurrogate) -> Result<Vec<f64>> {
    s.t_blocks
        .iter()
        .map(|t| {
            if t.nrows() == 1 {
                Ok(t[(0, 0)])
            } else {
                Err(Error::UnsupportedRestriction(
                    "scalar penalties require random intercepts".into(),
                ))
            }
        })
        .collect()
}
