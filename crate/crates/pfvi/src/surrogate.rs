//! The Gaussian target π(θ) induced by a fixed q(φ).
//!
//! For both likelihoods, exponentiating the expected log joint under q(φ)
//! gives a Gaussian over θ = (β, α_1, …, α_K) with precision WᵀW + P and
//! linear term Wᵀν, where W_0 = DX, W_k = DZ_k, P_k = I ⊗ T_k and P_0 = 0.
//! Collapsing a block set C produces
//!
//!   π(θ_C | θ_U) = N((W_CᵀW_C + P_C)⁻¹ W_Cᵀ(ν − W_U θ_U), (W_CᵀW_C + P_C)⁻¹)
//!   π(θ_U)       = N((P_U + W_UᵀM_C W_U)⁻¹ W_UᵀM_C ν,    (P_U + W_UᵀM_C W_U)⁻¹)
//!
//! with M_C = I − W_C (W_CᵀW_C + P_C)⁻¹ W_Cᵀ and M_∅ = I. The collapsed
//! system keeps one Cholesky of W_CᵀW_C + P_C and applies M_C by solves;
//! dense paths live behind a dimension guard and exist for oracles only.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::design::{build_designs, FactorDesign};
use crate::error::{Error, Result};
use crate::linalg::{check_guard, spd_cholesky, symmetrize, DENSE_GUARD_DEFAULT};
use crate::model::{Likelihood, MixedModelData};

/// Inverse-Wishart parameters for one q(Σ_k); E[Σ_k⁻¹] = df · scale⁻¹.
#[derive(Debug, Clone)]
pub struct IwParams {
    pub df: f64,
    pub scale: DMatrix<f64>,
}

impl IwParams {
    pub fn mean_inverse(&self) -> Result<DMatrix<f64>> {
        if self.df <= 0.0 {
            return Err(Error::Domain(format!(
                "inverse-Wishart df must be positive, got {}",
                self.df
            )));
        }
        let chol = spd_cholesky(self.scale.clone(), "iw scale")?;
        Ok(chol.inverse() * self.df)
    }
}

/// Inverse-gamma parameters for q(σ²); E[1/σ²] = a/b.
#[derive(Debug, Clone, Copy)]
pub struct IgParams {
    pub a: f64,
    pub b: f64,
}

impl IgParams {
    pub fn mean_inverse(&self) -> Result<f64> {
        if self.a <= 0.0 || self.b <= 0.0 {
            return Err(Error::Domain(format!(
                "inverse-gamma parameters must be positive, got a={}, b={}",
                self.a, self.b
            )));
        }
        Ok(self.a / self.b)
    }
}

/// Polya-Gamma parameters for the q(ω_i) factors.
#[derive(Debug, Clone)]
pub struct PgParams {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

/// E[ω] for ω ~ PG(b, c); c = 0 is the removable singularity b/4.
pub fn pg_mean(b: f64, c: f64) -> f64 {
    let c = c.abs();
    if c < 1e-4 {
        // tanh(x)/x = 1 − x²/3 + O(x⁴) with x = c/2
        b / 4.0 * (1.0 - c * c / 12.0)
    } else {
        b / (2.0 * c) * (c / 2.0).tanh()
    }
}

/// The q(φ) parameters a surrogate is built from.
#[derive(Debug, Clone)]
pub struct QPhi {
    pub iw: Vec<IwParams>,
    /// Present iff the likelihood is Gaussian.
    pub resid: Option<IgParams>,
    /// Present iff the likelihood is binomial.
    pub omega: Option<PgParams>,
}

/// The Gaussian target π(θ) at a fixed q(φ).
#[derive(Debug, Clone)]
pub struct GaussianSurrogate {
    pub nu: DVector<f64>,
    /// D_ii (positive square roots of the working weights).
    pub d: DVector<f64>,
    /// T_k per factor; P_k = I_{G_k} ⊗ T_k.
    pub t_blocks: Vec<DMatrix<f64>>,
    pub x: DMatrix<f64>,
    pub designs: Vec<FactorDesign>,
}

/// Build the surrogate from data and current q(φ).
pub fn build_surrogate(
    data: &MixedModelData,
    lik: Likelihood,
    q_phi: &QPhi,
) -> Result<GaussianSurrogate> {
    if q_phi.iw.len() != data.num_factors() {
        return Err(Error::Validation(
            "q(φ) must carry one inverse-Wishart per factor".into(),
        ));
    }
    let n = data.n;
    let (nu, d, resid_scale) = match lik {
        Likelihood::Gaussian => {
            let ig = q_phi.resid.ok_or_else(|| {
                Error::Validation("Gaussian surrogate requires q(σ²) parameters".into())
            })?;
            let e_inv = ig.mean_inverse()?;
            let root = e_inv.sqrt();
            let nu = data.y.map(|y| y * root);
            let d = DVector::from_element(n, root);
            (nu, d, e_inv)
        }
        Likelihood::Binomial => {
            let pg = q_phi.omega.as_ref().ok_or_else(|| {
                Error::Validation("binomial surrogate requires q(ω) parameters".into())
            })?;
            if pg.b.len() != n || pg.c.len() != n {
                return Err(Error::Validation(
                    "q(ω) must carry one (b_i, c_i) pair per observation".into(),
                ));
            }
            let mut nu = DVector::zeros(n);
            let mut d = DVector::zeros(n);
            for i in 0..n {
                if pg.c[i] < 0.0 {
                    return Err(Error::Domain(format!("c_i must be ≥ 0, got {}", pg.c[i])));
                }
                let w = pg_mean(pg.b[i], pg.c[i]);
                if w <= 0.0 {
                    return Err(Error::Domain(format!(
                        "E[ω_{i}] must be positive, got {w}"
                    )));
                }
                let root = w.sqrt();
                d[i] = root;
                nu[i] = (data.y[i] - pg.b[i] / 2.0) / root;
            }
            (nu, d, 1.0)
        }
    };
    let t_blocks = q_phi
        .iw
        .iter()
        .map(|p| p.mean_inverse().map(|m| m * resid_scale))
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianSurrogate {
        nu,
        d,
        t_blocks,
        x: data.x.clone(),
        designs: build_designs(data),
    })
}

impl GaussianSurrogate {
    pub fn n(&self) -> usize {
        self.nu.len()
    }

    pub fn num_factors(&self) -> usize {
        self.designs.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.num_factors() + 1
    }

    pub fn block_dim(&self, block: usize) -> usize {
        if block == 0 {
            self.x.ncols()
        } else {
            self.designs[block - 1].ncols()
        }
    }

    pub fn total_dim(&self) -> usize {
        (0..self.num_blocks()).map(|b| self.block_dim(b)).sum()
    }

    /// W_bᵀ v.
    pub fn wt_mul(&self, block: usize, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.block_dim(block));
        self.wt_mul_into(block, v.as_slice(), out.as_mut_slice());
        out
    }

    pub fn wt_mul_into(&self, block: usize, v: &[f64], out: &mut [f64]) {
        if block == 0 {
            for j in 0..self.x.ncols() {
                let mut acc = 0.0;
                for i in 0..self.n() {
                    acc += self.d[i] * self.x[(i, j)] * v[i];
                }
                out[j] += acc;
            }
        } else {
            self.designs[block - 1].accumulate_wt_v(self.d.as_slice(), v, out);
        }
    }

    /// out += W_b · coef.
    pub fn w_mul_add(&self, block: usize, coef: &[f64], out: &mut [f64]) {
        if block == 0 {
            for i in 0..self.n() {
                let mut acc = 0.0;
                for j in 0..self.x.ncols() {
                    acc += self.x[(i, j)] * coef[j];
                }
                out[i] += self.d[i] * acc;
            }
        } else {
            self.designs[block - 1].accumulate_w_coef(self.d.as_slice(), coef, out);
        }
    }

    /// out += Z_b · coef (unweighted design; η accumulation).
    pub fn z_mul_add(&self, block: usize, coef: &[f64], out: &mut [f64]) {
        if block == 0 {
            for i in 0..self.n() {
                let mut acc = 0.0;
                for j in 0..self.x.ncols() {
                    acc += self.x[(i, j)] * coef[j];
                }
                out[i] += acc;
            }
        } else {
            let ones = vec![1.0; self.n()];
            self.designs[block - 1].accumulate_w_coef(&ones, coef, out);
        }
    }

    /// Penalty matrix T for one factor block (block > 0).
    pub fn penalty(&self, block: usize) -> &DMatrix<f64> {
        &self.t_blocks[block - 1]
    }

    /// Dense cross-product W_aᵀ W_b.
    pub fn cross(&self, a: usize, b: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.block_dim(a), self.block_dim(b));
        let n = self.n();
        match (a, b) {
            (0, 0) => {
                for i in 0..n {
                    let d2 = self.d[i] * self.d[i];
                    for r in 0..self.x.ncols() {
                        for c in 0..self.x.ncols() {
                            out[(r, c)] += d2 * self.x[(i, r)] * self.x[(i, c)];
                        }
                    }
                }
            }
            (0, _) => {
                let zb = &self.designs[b - 1];
                for i in 0..n {
                    let d2 = self.d[i] * self.d[i];
                    let base = zb.membership[i] * zb.effect_dim;
                    for r in 0..self.x.ncols() {
                        for c in 0..zb.effect_dim {
                            out[(r, base + c)] += d2 * self.x[(i, r)] * zb.slopes[(i, c)];
                        }
                    }
                }
            }
            (_, 0) => out = self.cross(0, a).transpose(),
            (_, _) => {
                let za = &self.designs[a - 1];
                let zb = &self.designs[b - 1];
                for i in 0..n {
                    let d2 = self.d[i] * self.d[i];
                    let ra = za.membership[i] * za.effect_dim;
                    let cb = zb.membership[i] * zb.effect_dim;
                    for r in 0..za.effect_dim {
                        for c in 0..zb.effect_dim {
                            out[(ra + r, cb + c)] += d2 * za.slopes[(i, r)] * zb.slopes[(i, c)];
                        }
                    }
                }
            }
        }
        out
    }

    /// Per-level Gram blocks of W_k (block > 0).
    pub fn factor_gram_blocks(&self, block: usize) -> Vec<DMatrix<f64>> {
        self.designs[block - 1].gram_blocks(self.d.as_slice())
    }

    /// Dense W_b; oracle use.
    pub fn dense_w(&self, block: usize) -> DMatrix<f64> {
        let n = self.n();
        if block == 0 {
            let mut w = self.x.clone();
            for i in 0..n {
                for j in 0..w.ncols() {
                    w[(i, j)] *= self.d[i];
                }
            }
            w
        } else {
            let mut w = self.designs[block - 1].to_dense();
            for i in 0..n {
                for j in 0..w.ncols() {
                    w[(i, j)] *= self.d[i];
                }
            }
            w
        }
    }

    /// Dense penalty P_b; oracle use.
    pub fn dense_penalty(&self, block: usize) -> DMatrix<f64> {
        let dim = self.block_dim(block);
        let mut p = DMatrix::zeros(dim, dim);
        if block > 0 {
            let t = self.penalty(block);
            let dk = t.nrows();
            let levels = dim / dk;
            for g in 0..levels {
                for r in 0..dk {
                    for c in 0..dk {
                        p[(g * dk + r, g * dk + c)] = t[(r, c)];
                    }
                }
            }
        }
        p
    }

    /// Dense joint precision WᵀW + P over all blocks; oracle use.
    pub fn dense_joint_precision_with_guard(&self, guard: usize) -> Result<DMatrix<f64>> {
        check_guard(self.total_dim(), guard)?;
        let p = self.total_dim();
        let mut q = DMatrix::zeros(p, p);
        let mut row_off = 0;
        for a in 0..self.num_blocks() {
            let da = self.block_dim(a);
            let mut col_off = 0;
            for b in 0..self.num_blocks() {
                let db = self.block_dim(b);
                if b >= a {
                    let cross = self.cross(a, b);
                    q.view_mut((row_off, col_off), (da, db)).copy_from(&cross);
                    if b > a {
                        q.view_mut((col_off, row_off), (db, da))
                            .copy_from(&cross.transpose());
                    }
                }
                col_off += db;
            }
            let pen = self.dense_penalty(a);
            let mut diag = q.view_mut((row_off, row_off), (da, da));
            diag += &pen;
            row_off += da;
        }
        symmetrize(&mut q);
        Ok(q)
    }

    pub fn dense_joint_precision(&self) -> Result<DMatrix<f64>> {
        self.dense_joint_precision_with_guard(DENSE_GUARD_DEFAULT)
    }

    /// Dense joint mean and covariance of π(θ); oracle use.
    pub fn dense_joint_moments_with_guard(&self, guard: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let q = self.dense_joint_precision_with_guard(guard)?;
        let chol = spd_cholesky(q, "joint precision")?;
        let mut rhs = DVector::zeros(self.total_dim());
        let mut off = 0;
        for b in 0..self.num_blocks() {
            let dim = self.block_dim(b);
            self.wt_mul_into(b, self.nu.as_slice(), &mut rhs.as_mut_slice()[off..off + dim]);
            off += dim;
        }
        let mean = chol.solve(&rhs);
        let mut cov = chol.inverse();
        symmetrize(&mut cov);
        Ok((mean, cov))
    }

    pub fn dense_joint_moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.dense_joint_moments_with_guard(DENSE_GUARD_DEFAULT)
    }
}

/// The (C, U) split of block indices {0, …, K}.
///
/// `collapsed` keeps ascending order; `uncollapsed` is the ascending
/// complement. U = ∅ is the unfactorized family (single joint Gaussian).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub collapsed: Vec<usize>,
    pub uncollapsed: Vec<usize>,
}

impl Partition {
    pub fn new(mut collapsed: Vec<usize>, num_blocks: usize) -> Result<Self> {
        collapsed.sort_unstable();
        collapsed.dedup();
        if let Some(&bad) = collapsed.iter().find(|&&b| b >= num_blocks) {
            return Err(Error::Validation(format!(
                "collapsed block index {bad} out of range 0..{num_blocks}"
            )));
        }
        let uncollapsed = (0..num_blocks).filter(|b| !collapsed.contains(b)).collect();
        Ok(Partition {
            collapsed,
            uncollapsed,
        })
    }

    /// Fully factorized: C = ∅.
    pub fn fully_factorized(num_blocks: usize) -> Self {
        Partition::new(vec![], num_blocks).unwrap()
    }

    /// Unfactorized: C = {0, …, K}.
    pub fn unfactorized(num_blocks: usize) -> Self {
        Partition::new((0..num_blocks).collect(), num_blocks).unwrap()
    }

    /// Partially factorized with only the fixed effects collapsed.
    pub fn collapse_fixed(num_blocks: usize) -> Self {
        Partition::new(vec![0], num_blocks).unwrap()
    }

    pub fn num_blocks(&self) -> usize {
        self.collapsed.len() + self.uncollapsed.len()
    }

    pub fn label(&self) -> String {
        if self.collapsed.is_empty() {
            "ff".to_string()
        } else if self.uncollapsed.is_empty() {
            "uf".to_string()
        } else {
            let ids: Vec<String> = self.collapsed.iter().map(|b| b.to_string()).collect();
            format!("pf:{}", ids.join(","))
        }
    }
}

/// The collapsed-side linear system: A = W_CᵀW_C + P_C, its Cholesky, and
/// the block layout of C within A's rows.
pub struct CollapsedSystem {
    pub blocks: Vec<usize>,
    pub offsets: Vec<usize>,
    pub dim: usize,
    pub a: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl CollapsedSystem {
    pub fn build(s: &GaussianSurrogate, part: &Partition) -> Result<Self> {
        let blocks = part.collapsed.clone();
        let mut offsets = Vec::with_capacity(blocks.len());
        let mut dim = 0;
        for &b in &blocks {
            offsets.push(dim);
            dim += s.block_dim(b);
        }
        let mut a = DMatrix::zeros(dim, dim);
        for (ia, &ba) in blocks.iter().enumerate() {
            for (ib, &bb) in blocks.iter().enumerate() {
                if bb < ba {
                    continue;
                }
                let cross = s.cross(ba, bb);
                a.view_mut((offsets[ia], offsets[ib]), (cross.nrows(), cross.ncols()))
                    .copy_from(&cross);
                if bb > ba {
                    a.view_mut((offsets[ib], offsets[ia]), (cross.ncols(), cross.nrows()))
                        .copy_from(&cross.transpose());
                }
            }
            let pen = s.dense_penalty(ba);
            let da = s.block_dim(ba);
            let mut diag = a.view_mut((offsets[ia], offsets[ia]), (da, da));
            diag += &pen;
        }
        symmetrize(&mut a);
        let chol = if dim == 0 {
            None
        } else {
            Some(spd_cholesky(a.clone(), &format!("collapsed blocks {blocks:?}"))?)
        };
        Ok(CollapsedSystem {
            blocks,
            offsets,
            dim,
            a,
            chol,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.dim == 0
    }

    /// A⁻¹ rhs.
    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        match &self.chol {
            Some(c) => c.solve(rhs),
            None => DVector::zeros(0),
        }
    }

    /// A⁻¹ Rhs (matrix right-hand side).
    pub fn solve_mat(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => c.solve(rhs),
            None => DMatrix::zeros(0, rhs.ncols()),
        }
    }

    /// Dense A⁻¹.
    pub fn inverse(&self) -> DMatrix<f64> {
        match &self.chol {
            Some(c) => {
                let mut inv = c.inverse();
                symmetrize(&mut inv);
                inv
            }
            None => DMatrix::zeros(0, 0),
        }
    }

    /// log |A|.
    pub fn logdet(&self) -> f64 {
        match &self.chol {
            Some(c) => c.l().diagonal().iter().map(|v| 2.0 * v.ln()).sum(),
            None => 0.0,
        }
    }

    /// Stacked W_Cᵀ v.
    pub fn wc_t_mul(&self, s: &GaussianSurrogate, v: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for (idx, &b) in self.blocks.iter().enumerate() {
            let dim = s.block_dim(b);
            s.wt_mul_into(
                b,
                v.as_slice(),
                &mut out.as_mut_slice()[self.offsets[idx]..self.offsets[idx] + dim],
            );
        }
        out
    }

    /// out += W_C · coef.
    pub fn wc_mul_add(&self, s: &GaussianSurrogate, coef: &DVector<f64>, out: &mut DVector<f64>) {
        for (idx, &b) in self.blocks.iter().enumerate() {
            let dim = s.block_dim(b);
            s.w_mul_add(
                b,
                &coef.as_slice()[self.offsets[idx]..self.offsets[idx] + dim],
                out.as_mut_slice(),
            );
        }
    }

    /// M_C v = v − W_C A⁻¹ W_Cᵀ v, never forming M_C.
    pub fn apply_projector(&self, s: &GaussianSurrogate, v: &DVector<f64>) -> DVector<f64> {
        if self.is_empty() {
            return v.clone();
        }
        let t = self.wc_t_mul(s, v);
        let u = self.solve_vec(&t);
        let mut out = v.clone();
        let mut correction = DVector::zeros(v.len());
        self.wc_mul_add(s, &u, &mut correction);
        out -= correction;
        out
    }

    /// Dense W_CᵀW_k for an uncollapsed block k, laid out in C-row order.
    pub fn cross_with_block(&self, s: &GaussianSurrogate, k: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, s.block_dim(k));
        for (idx, &b) in self.blocks.iter().enumerate() {
            let cross = s.cross(b, k);
            out.view_mut((self.offsets[idx], 0), (cross.nrows(), cross.ncols()))
                .copy_from(&cross);
        }
        out
    }
}

/// Exact dense moments of π(θ_U) and the conditional law π(θ_C | θ_U).
/// Small instances and oracle tests only.
#[derive(Debug)]
pub struct TargetMoments {
    pub u_blocks: Vec<usize>,
    pub u_offsets: Vec<usize>,
    pub u_mean: DVector<f64>,
    pub u_cov: DMatrix<f64>,
    pub u_precision: DMatrix<f64>,
    pub c_blocks: Vec<usize>,
    /// cov(θ_C | θ_U) = (W_CᵀW_C + P_C)⁻¹.
    pub cond_cov: DMatrix<f64>,
    /// H in E[θ_C | θ_U] = cond_offset − H θ_U.
    pub cond_map: DMatrix<f64>,
    /// (W_CᵀW_C + P_C)⁻¹ W_Cᵀ ν.
    pub cond_offset: DVector<f64>,
}

pub fn exact_target_moments(s: &GaussianSurrogate, part: &Partition) -> Result<TargetMoments> {
    exact_target_moments_with_guard(s, part, DENSE_GUARD_DEFAULT)
}

pub fn exact_target_moments_with_guard(
    s: &GaussianSurrogate,
    part: &Partition,
    guard: usize,
) -> Result<TargetMoments> {
    check_guard(s.total_dim(), guard)?;
    let collapsed = CollapsedSystem::build(s, part)?;

    let mut u_offsets = Vec::new();
    let mut dim_u = 0;
    for &b in &part.uncollapsed {
        u_offsets.push(dim_u);
        dim_u += s.block_dim(b);
    }

    // Dense W_U and M_C W_U, column by column.
    let n = s.n();
    let mut w_u = DMatrix::zeros(n, dim_u);
    for (idx, &b) in part.uncollapsed.iter().enumerate() {
        let dim = s.block_dim(b);
        for j in 0..dim {
            let mut coef = vec![0.0; dim];
            coef[j] = 1.0;
            let mut col = vec![0.0; n];
            s.w_mul_add(b, &coef, &mut col);
            for i in 0..n {
                w_u[(i, u_offsets[idx] + j)] = col[i];
            }
        }
    }
    let mut mw_u = DMatrix::zeros(n, dim_u);
    for j in 0..dim_u {
        let col = DVector::from_column_slice(w_u.column(j).as_slice());
        let proj = collapsed.apply_projector(s, &col);
        mw_u.set_column(j, &proj);
    }

    let mut u_precision = w_u.transpose() * &mw_u;
    let mut off = 0;
    for &b in &part.uncollapsed {
        let dim = s.block_dim(b);
        let pen = s.dense_penalty(b);
        let mut diag = u_precision.view_mut((off, off), (dim, dim));
        diag += &pen;
        off += dim;
    }
    symmetrize(&mut u_precision);

    let (u_mean, u_cov) = if dim_u > 0 {
        let chol = spd_cholesky(u_precision.clone(), "uncollapsed marginal precision")?;
        let rhs = mw_u.transpose() * &s.nu;
        let mean = chol.solve(&rhs);
        let mut cov = chol.inverse();
        symmetrize(&mut cov);
        (mean, cov)
    } else {
        (DVector::zeros(0), DMatrix::zeros(0, 0))
    };

    let cond_cov = collapsed.inverse();
    let cond_offset = collapsed.solve_vec(&collapsed.wc_t_mul(s, &s.nu));
    let cond_map = if collapsed.is_empty() || dim_u == 0 {
        DMatrix::zeros(collapsed.dim, dim_u)
    } else {
        let wc_t_wu = collapsed.wc_t_mul_mat(s, &w_u);
        collapsed.solve_mat(&wc_t_wu)
    };

    Ok(TargetMoments {
        u_blocks: part.uncollapsed.clone(),
        u_offsets,
        u_mean,
        u_cov,
        u_precision,
        c_blocks: part.collapsed.clone(),
        cond_cov,
        cond_map,
        cond_offset,
    })
}

impl CollapsedSystem {
    /// W_Cᵀ M for a dense n×m matrix M.
    fn wc_t_mul_mat(&self, s: &GaussianSurrogate, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, m.ncols());
        for j in 0..m.ncols() {
            let col = DVector::from_column_slice(m.column(j).as_slice());
            let t = self.wc_t_mul(s, &col);
            out.set_column(j, &t);
        }
        out
    }
}
