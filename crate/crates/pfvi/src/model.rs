//! Mixed-model data: responses, fixed-effect design, factor memberships and
//! random-slope covariates, plus long-format CSV ingestion and validation.
//!
//! The model has `n` observations with linear predictor
//! `η_i = x_iᵀβ + Σ_k z_{i,k}ᵀα_k`, where each categorical factor `k` has
//! `G_k` levels, per-level effect vectors of dimension `D_k`, and the sparse
//! covariate `z_{i,k}` places the slope vector `w_{i,k}` in the block of the
//! level observation `i` belongs to.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which likelihood the response follows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Binomial,
}

impl std::str::FromStr for Likelihood {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gaussian" => Ok(Likelihood::Gaussian),
            "binomial" => Ok(Likelihood::Binomial),
            other => Err(Error::Schema(format!("unknown likelihood `{other}`"))),
        }
    }
}

/// One categorical factor: its level count, per-level effect dimension and
/// the covariate names feeding the random slopes ("1" = intercept column).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorSpec {
    pub name: String,
    pub levels: usize,
    pub effect_dim: usize,
    pub slope_columns: Vec<String>,
}

impl FactorSpec {
    pub fn intercept_only(name: impl Into<String>, levels: usize) -> Self {
        FactorSpec {
            name: name.into(),
            levels,
            effect_dim: 1,
            slope_columns: vec!["1".to_string()],
        }
    }
}

/// Validated long-format data for one mixed model.
///
/// `memberships[k][i]` is the 0-based level of factor `k` that observation
/// `i` belongs to; `slope_values[k]` is the n×D_k matrix of w_{i,k} rows.
#[derive(Debug, Clone)]
pub struct MixedModelData {
    pub n: usize,
    pub y: DVector<f64>,
    pub trials: Vec<u64>,
    pub x: DMatrix<f64>,
    pub factors: Vec<FactorSpec>,
    pub memberships: Vec<Vec<usize>>,
    pub slope_values: Vec<DMatrix<f64>>,
}

impl MixedModelData {
    pub fn num_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn fixed_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Size of effect block `k` (0 = fixed effects, k>0 = factor k).
    pub fn block_dim(&self, block: usize) -> usize {
        if block == 0 {
            self.fixed_dim()
        } else {
            let f = &self.factors[block - 1];
            f.levels * f.effect_dim
        }
    }

    /// Total parameter count over all blocks.
    pub fn total_dim(&self) -> usize {
        (0..=self.num_factors()).map(|b| self.block_dim(b)).sum()
    }

    /// Construct from parts, running the type invariants.
    pub fn new(
        y: DVector<f64>,
        trials: Vec<u64>,
        x: DMatrix<f64>,
        factors: Vec<FactorSpec>,
        memberships: Vec<Vec<usize>>,
        slope_values: Vec<DMatrix<f64>>,
        lik: Likelihood,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || trials.len() != n {
            return Err(Error::Validation(
                "y, trials and X must agree on the number of rows".into(),
            ));
        }
        if memberships.len() != factors.len() || slope_values.len() != factors.len() {
            return Err(Error::Validation(
                "memberships and slope_values must have one entry per factor".into(),
            ));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.levels == 0 || f.effect_dim == 0 {
                return Err(Error::Validation(format!(
                    "factor `{}` must have levels ≥ 1 and effect_dim ≥ 1",
                    f.name
                )));
            }
            if f.slope_columns.len() != f.effect_dim {
                return Err(Error::Validation(format!(
                    "factor `{}`: slope_columns has {} entries, expected effect_dim {}",
                    f.name,
                    f.slope_columns.len(),
                    f.effect_dim
                )));
            }
            if memberships[k].len() != n {
                return Err(Error::Validation(format!(
                    "factor `{}`: membership vector length {} != n={}",
                    f.name,
                    memberships[k].len(),
                    n
                )));
            }
            if let Some(&bad) = memberships[k].iter().find(|&&g| g >= f.levels) {
                return Err(Error::Validation(format!(
                    "factor `{}`: membership index {} out of range 0..{}",
                    f.name, bad, f.levels
                )));
            }
            if slope_values[k].nrows() != n || slope_values[k].ncols() != f.effect_dim {
                return Err(Error::Validation(format!(
                    "factor `{}`: slope matrix must be {}×{}",
                    f.name, n, f.effect_dim
                )));
            }
        }
        if lik == Likelihood::Binomial {
            for i in 0..n {
                let yi = y[i];
                if yi < 0.0 || yi.fract() != 0.0 {
                    return Err(Error::Domain(format!(
                        "binomial response must be a nonnegative integer, got y[{i}]={yi}"
                    )));
                }
                if yi > trials[i] as f64 {
                    return Err(Error::Domain(format!(
                        "binomial response y[{i}]={yi} exceeds trials n_i={}",
                        trials[i]
                    )));
                }
            }
        }
        Ok(MixedModelData {
            n,
            y,
            trials,
            x,
            factors,
            memberships,
            slope_values,
        })
    }
}

/// Prior specification: one inverse-Wishart per factor; β flat; σ² improper
/// 1/σ² (Gaussian likelihood only).
#[derive(Debug, Clone)]
pub struct PriorSpec {
    pub iw_df: Vec<f64>,
    pub iw_scale: Vec<DMatrix<f64>>,
}

impl PriorSpec {
    /// Same scalar inverse-gamma prior IG(a, b) on every (1-dimensional)
    /// variance component; IG(a, b) is IW with df 2a and scale 2b.
    pub fn scalar_inverse_gamma(num_factors: usize, a: f64, b: f64) -> Self {
        PriorSpec {
            iw_df: vec![2.0 * a; num_factors],
            iw_scale: vec![DMatrix::from_element(1, 1, 2.0 * b); num_factors],
        }
    }

    pub fn validate(&self, data: &MixedModelData) -> Result<()> {
        if self.iw_df.len() != data.num_factors() || self.iw_scale.len() != data.num_factors() {
            return Err(Error::Validation(
                "prior must have one iw_df and one iw_scale per factor".into(),
            ));
        }
        for (k, f) in data.factors.iter().enumerate() {
            let d = f.effect_dim as f64;
            if self.iw_df[k] <= d - 1.0 {
                return Err(Error::Validation(format!(
                    "factor `{}`: inverse-Wishart df {} must exceed D_k - 1 = {}",
                    f.name,
                    self.iw_df[k],
                    d - 1.0
                )));
            }
            let s = &self.iw_scale[k];
            if s.nrows() != f.effect_dim || s.ncols() != f.effect_dim {
                return Err(Error::Validation(format!(
                    "factor `{}`: iw_scale must be {1}×{1}",
                    f.name, f.effect_dim
                )));
            }
            if (s - s.transpose()).amax() > 1e-12 * s.amax().max(1.0) {
                return Err(Error::Validation(format!(
                    "factor `{}`: iw_scale must be symmetric",
                    f.name
                )));
            }
            if s.clone().cholesky().is_none() {
                return Err(Error::Validation(format!(
                    "factor `{}`: iw_scale must be positive definite",
                    f.name
                )));
            }
        }
        Ok(())
    }
}

/// JSON column-role map for long-format CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DataSchema {
    pub response: String,
    #[serde(default)]
    pub trials: Option<String>,
    #[serde(default)]
    pub fixed: Vec<String>,
    pub factors: Vec<FactorSchema>,
    /// Prepend an all-ones intercept column to X (default true).
    #[serde(default = "default_true")]
    pub intercept: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FactorSchema {
    pub name: String,
    /// Extra slope covariates beyond the per-level intercept.
    #[serde(default)]
    pub slopes: Vec<String>,
}

/// Severity-tagged findings from `validate_model`.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub warnings: Vec<String>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.warnings.is_empty() && self.errors.is_empty()
    }
    pub fn is_fatal(&self) -> bool {
        !self.errors.is_empty()
    }
}

/// Load a long-format CSV under a column-role schema.
///
/// Factor levels are the sorted distinct values observed in the factor's
/// column, mapped to 0..G_k; an intercept column of ones is prepended to X
/// unless the schema opts out.
pub fn load_long_csv(path: &Path, schema: &DataSchema, lik: Likelihood) -> Result<MixedModelData> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers: Vec<String> = reader.headers()?.iter().map(|h| h.to_string()).collect();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}`")))
    };

    let response_col = col(&schema.response)?;
    let trials_col = schema.trials.as_deref().map(col).transpose()?;
    let fixed_cols: Vec<usize> = schema.fixed.iter().map(|c| col(c)).collect::<Result<_>>()?;
    let factor_cols: Vec<usize> = schema
        .factors
        .iter()
        .map(|f| col(&f.name))
        .collect::<Result<_>>()?;
    let slope_cols: Vec<Vec<usize>> = schema
        .factors
        .iter()
        .map(|f| f.slopes.iter().map(|c| col(c)).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    let parse_num = |v: &str, what: &str, row: usize| -> Result<f64> {
        v.trim().parse::<f64>().map_err(|_| {
            Error::Parse(format!("row {row}: non-numeric {what} value `{v}`"))
        })
    };

    let mut y = Vec::new();
    let mut trials = Vec::new();
    let mut fixed_rows: Vec<Vec<f64>> = Vec::new();
    let mut factor_raw: Vec<Vec<String>> = vec![Vec::new(); schema.factors.len()];
    let mut slope_rows: Vec<Vec<Vec<f64>>> = vec![Vec::new(); schema.factors.len()];

    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let get = |c: usize| -> &str { record.get(c).unwrap_or("") };
        y.push(parse_num(get(response_col), "response", row_idx)?);
        let t = match trials_col {
            Some(c) => {
                let v = parse_num(get(c), "trials", row_idx)?;
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(Error::Domain(format!(
                        "row {row_idx}: trials must be a positive integer, got {v}"
                    )));
                }
                v as u64
            }
            None => 1,
        };
        trials.push(t);
        fixed_rows.push(
            fixed_cols
                .iter()
                .map(|&c| parse_num(get(c), "fixed-effect", row_idx))
                .collect::<Result<_>>()?,
        );
        for (k, &c) in factor_cols.iter().enumerate() {
            factor_raw[k].push(get(c).trim().to_string());
            slope_rows[k].push(
                slope_cols[k]
                    .iter()
                    .map(|&sc| parse_num(get(sc), "slope", row_idx))
                    .collect::<Result<_>>()?,
            );
        }
    }

    let n = y.len();
    if n == 0 {
        return Err(Error::Validation("CSV contains no data rows".into()));
    }

    // Sorted distinct observed values define the level indexing.
    let mut factors = Vec::new();
    let mut memberships = Vec::new();
    let mut slope_values = Vec::new();
    for (k, fs) in schema.factors.iter().enumerate() {
        let mut level_map = BTreeMap::new();
        for v in &factor_raw[k] {
            level_map.entry(v.clone()).or_insert(0usize);
        }
        for (idx, (_, slot)) in level_map.iter_mut().enumerate() {
            *slot = idx;
        }
        let g = level_map.len();
        let membership: Vec<usize> = factor_raw[k].iter().map(|v| level_map[v]).collect();
        let d = 1 + fs.slopes.len();
        let mut w = DMatrix::zeros(n, d);
        for i in 0..n {
            w[(i, 0)] = 1.0;
            for (j, &v) in slope_rows[k][i].iter().enumerate() {
                w[(i, j + 1)] = v;
            }
        }
        let mut slope_columns = vec!["1".to_string()];
        slope_columns.extend(fs.slopes.iter().cloned());
        factors.push(FactorSpec {
            name: fs.name.clone(),
            levels: g,
            effect_dim: d,
            slope_columns,
        });
        memberships.push(membership);
        slope_values.push(w);
    }

    let intercept = usize::from(schema.intercept);
    let d0 = intercept + fixed_cols.len();
    let mut x = DMatrix::zeros(n, d0);
    for i in 0..n {
        if schema.intercept {
            x[(i, 0)] = 1.0;
        }
        for (j, &v) in fixed_rows[i].iter().enumerate() {
            x[(i, intercept + j)] = v;
        }
    }

    MixedModelData::new(
        DVector::from_vec(y),
        trials,
        x,
        factors,
        memberships,
        slope_values,
        lik,
    )
}

/// Numerical rank of X via SVD.
fn x_rank(x: &DMatrix<f64>) -> usize {
    if x.ncols() == 0 {
        return 0;
    }
    let svd = x.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-10 * (x.nrows().max(x.ncols()) as f64);
    svd.singular_values.iter().filter(|&&s| s > tol).count()
}

/// Check the type invariants, flag empty factor levels (warning) and rank
/// deficiency of X (fatal).
pub fn validate_model(
    data: &MixedModelData,
    prior: &PriorSpec,
    lik: Likelihood,
) -> ValidationReport {
    let mut warnings = Vec::new();
    let mut errors = Vec::new();

    if let Err(e) = prior.validate(data) {
        errors.push(e.to_string());
    }
    if lik == Likelihood::Binomial {
        for i in 0..data.n {
            if data.y[i] > data.trials[i] as f64 || data.y[i] < 0.0 || data.y[i].fract() != 0.0 {
                errors.push(format!(
                    "observation {i}: binomial response {} incompatible with trials {}",
                    data.y[i], data.trials[i]
                ));
            }
        }
    }
    for (k, f) in data.factors.iter().enumerate() {
        let mut seen = vec![0usize; f.levels];
        for &g in &data.memberships[k] {
            seen[g] += 1;
        }
        for (g, &count) in seen.iter().enumerate() {
            if count == 0 {
                warnings.push(format!(
                    "factor `{}`: level {} has no observations (prior keeps it proper)",
                    f.name, g
                ));
            }
        }
    }
    let rank = x_rank(&data.x);
    if rank < data.x.ncols() {
        errors.push(format!(
            "fixed-effect design X is rank deficient: rank {} < {} columns",
            rank,
            data.x.ncols()
        ));
    }
    ValidationReport { warnings, errors }
}
