//! Sparse random-effect design blocks Z_k.
//!
//! Row i of Z_k has exactly D_k nonzeros: the slope vector w_{i,k} placed in
//! the column block of the level that observation i belongs to, so that
//! z_{i,k}ᵀα_k = w_{i,k}ᵀα_{k,g(i)}. Blocks are never materialized in fits;
//! all operations stream over observations with an external row weight d_i,
//! which lets the same code apply Z_k and W_k = D·Z_k.

use nalgebra::DMatrix;

use crate::model::MixedModelData;

/// One factor's sparse design.
#[derive(Debug, Clone)]
pub struct FactorDesign {
    pub levels: usize,
    pub effect_dim: usize,
    pub membership: Vec<usize>,
    pub slopes: DMatrix<f64>,
}

impl FactorDesign {
    pub fn n(&self) -> usize {
        self.membership.len()
    }

    /// Total column count G_k · D_k.
    pub fn ncols(&self) -> usize {
        self.levels * self.effect_dim
    }

    /// out[block g_i] += d_i · v_i · w_i  (i.e. out += (D Z)ᵀ v).
    pub fn accumulate_wt_v(&self, d: &[f64], v: &[f64], out: &mut [f64]) {
        let dk = self.effect_dim;
        for i in 0..self.n() {
            let base = self.membership[i] * dk;
            let s = d[i] * v[i];
            for j in 0..dk {
                out[base + j] += s * self.slopes[(i, j)];
            }
        }
    }

    /// out_i += d_i · w_iᵀ coef[block g_i]  (i.e. out += (D Z) coef).
    pub fn accumulate_w_coef(&self, d: &[f64], coef: &[f64], out: &mut [f64]) {
        let dk = self.effect_dim;
        for i in 0..self.n() {
            let base = self.membership[i] * dk;
            let mut acc = 0.0;
            for j in 0..dk {
                acc += self.slopes[(i, j)] * coef[base + j];
            }
            out[i] += d[i] * acc;
        }
    }

    /// Per-level Gram blocks of W = DZ: S_g = Σ_{i: g_i = g} d_i² w_i w_iᵀ.
    pub fn gram_blocks(&self, d: &[f64]) -> Vec<DMatrix<f64>> {
        let dk = self.effect_dim;
        let mut blocks = vec![DMatrix::zeros(dk, dk); self.levels];
        for i in 0..self.n() {
            let g = self.membership[i];
            let d2 = d[i] * d[i];
            let b = &mut blocks[g];
            for r in 0..dk {
                for c in 0..dk {
                    b[(r, c)] += d2 * self.slopes[(i, r)] * self.slopes[(i, c)];
                }
            }
        }
        blocks
    }

    /// Dense Z_k; oracle/test use only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut z = DMatrix::zeros(self.n(), self.ncols());
        for i in 0..self.n() {
            let base = self.membership[i] * self.effect_dim;
            for j in 0..self.effect_dim {
                z[(i, base + j)] = self.slopes[(i, j)];
            }
        }
        z
    }
}

/// Assemble the sparse design blocks {Z_k} from validated data.
pub fn build_designs(data: &MixedModelData) -> Vec<FactorDesign> {
    data.factors
        .iter()
        .enumerate()
        .map(|(k, f)| FactorDesign {
            levels: f.levels,
            effect_dim: f.effect_dim,
            membership: data.memberships[k].clone(),
            slopes: data.slope_values[k].clone(),
        })
        .collect()
}

/// Read memberships back from nonzero block positions of a dense Z.
/// Test utility for the round-trip invariant.
pub fn memberships_from_dense(z: &DMatrix<f64>, effect_dim: usize) -> Vec<usize> {
    (0..z.nrows())
        .map(|i| {
            let mut found = 0usize;
            for j in 0..z.ncols() {
                if z[(i, j)] != 0.0 {
                    found = j / effect_dim;
                    break;
                }
            }
            found
        })
        .collect()
}
