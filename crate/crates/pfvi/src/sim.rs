//! Simulation designs and the experiment grid: missing-completely-at-random
//! crossed designs, uniform biregular designs, model-based response
//! generation, and the UQF-versus-dimension / time-per-iteration grids.
//!
//! Every statistical output is bit-reproducible from the master seed;
//! wall-clock columns are measured quantities and vary run to run.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::Serialize;

use crate::cavi::{fit, FitOptions};
use crate::error::{Error, Result};
use crate::gibbs::{gibbs_gaussian, GibbsOptions};
use crate::linalg::DENSE_GUARD_DEFAULT;
use crate::model::{FactorSpec, Likelihood, MixedModelData, PriorSpec};
use crate::rng::{derive_seed, rng_from_seed};
use crate::surrogate::Partition;
use crate::uqf::{uqf_analytic, uqf_split_sample};

/// How a design was generated; with the seed, enough to regenerate it.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Generator {
    /// Each of the G₁·G₂ cells kept independently with prob 1 − missing_prob.
    Mcar { g1: usize, g2: usize, missing_prob: f64 },
    /// Exactly n distinct cells drawn uniformly from the G₁×G₂ grid.
    McarFixedN { g1: usize, g2: usize, n: usize },
    /// n observations with i.i.d. uniform cell memberships (repeats allowed).
    UniformCells { g1: usize, g2: usize, n: usize },
    /// Uniform biregular design: level degrees exactly (d₁, d₂).
    Biregular { n: usize, d1: usize, d2: usize },
}

#[derive(Debug, Clone, Serialize)]
pub struct DesignMeta {
    pub generator: Generator,
    pub seed: u64,
    /// Regeneration attempts spent on connectivity/empty-level rejections.
    pub attempts: usize,
}

/// A two-factor crossed design: one observation per cell entry.
#[derive(Debug, Clone)]
pub struct CrossedDesign {
    pub g1: usize,
    pub g2: usize,
    pub cells: Vec<(usize, usize)>,
    pub meta: DesignMeta,
}

impl CrossedDesign {
    pub fn n(&self) -> usize {
        self.cells.len()
    }
}

/// Every level observed and the bipartite level graph connected.
fn design_ok(g1: usize, g2: usize, cells: &[(usize, usize)]) -> bool {
    if cells.is_empty() {
        return false;
    }
    let mut parent: Vec<usize> = (0..g1 + g2).collect();
    fn find(parent: &mut [usize], x: usize) -> usize {
        let mut root = x;
        while parent[root] != root {
            root = parent[root];
        }
        let mut cur = x;
        while parent[cur] != root {
            let next = parent[cur];
            parent[cur] = root;
            cur = next;
        }
        root
    }
    let mut seen1 = vec![false; g1];
    let mut seen2 = vec![false; g2];
    for &(a, b) in cells {
        seen1[a] = true;
        seen2[b] = true;
        let ra = find(&mut parent, a);
        let rb = find(&mut parent, g1 + b);
        parent[ra] = rb;
    }
    if seen1.iter().any(|&s| !s) || seen2.iter().any(|&s| !s) {
        return false;
    }
    let root = find(&mut parent, 0);
    (0..g1 + g2).all(|v| find(&mut parent, v) == root)
}

const REGEN_LIMIT: usize = 100;

/// MCAR crossed design: keep each cell with probability 1 − missing_prob,
/// regenerating (up to 100 attempts) until no level is empty and the level
/// graph is connected.
pub fn gen_crossed_mcar(
    g1: usize,
    g2: usize,
    missing_prob: f64,
    rng_seed: u64,
) -> Result<CrossedDesign> {
    if g1 < 2 || g2 < 2 {
        return Err(Error::Validation("need G₁, G₂ ≥ 2".into()));
    }
    if !(0.0..1.0).contains(&missing_prob) {
        return Err(Error::Validation("missing_prob must lie in [0, 1)".into()));
    }
    let mut rng = rng_from_seed(rng_seed);
    for attempt in 0..REGEN_LIMIT {
        let mut cells = Vec::new();
        for a in 0..g1 {
            for b in 0..g2 {
                if rng.gen::<f64>() >= missing_prob {
                    cells.push((a, b));
                }
            }
        }
        if design_ok(g1, g2, &cells) {
            return Ok(CrossedDesign {
                g1,
                g2,
                cells,
                meta: DesignMeta {
                    generator: Generator::Mcar { g1, g2, missing_prob },
                    seed: rng_seed,
                    attempts: attempt + 1,
                },
            });
        }
    }
    Err(Error::DesignGeneration(format!(
        "no connected MCAR design in {REGEN_LIMIT} attempts (G=({g1},{g2}), p={missing_prob})"
    )))
}

/// MCAR conditioned on the observation count: exactly `n` distinct cells
/// drawn uniformly. Used where n must stay fixed while G varies.
pub fn gen_crossed_mcar_fixed_n(
    g1: usize,
    g2: usize,
    n: usize,
    rng_seed: u64,
) -> Result<CrossedDesign> {
    if n > g1 * g2 {
        return Err(Error::Validation(format!(
            "cannot place {n} distinct cells in a {g1}×{g2} grid"
        )));
    }
    if n < g1.max(g2) {
        return Err(Error::Validation(
            "need at least max(G₁, G₂) observations to cover every level".into(),
        ));
    }
    let mut rng = rng_from_seed(rng_seed);
    for attempt in 0..REGEN_LIMIT {
        // Floyd-style distinct sampling of cell indices.
        let total = g1 * g2;
        let mut chosen = std::collections::HashSet::with_capacity(n);
        for j in (total - n)..total {
            let t = rng.gen_range(0..=j);
            let pick = if chosen.contains(&t) { j } else { t };
            chosen.insert(pick);
        }
        let cells: Vec<(usize, usize)> = chosen.iter().map(|&c| (c / g2, c % g2)).collect();
        let mut cells = cells;
        cells.sort_unstable();
        if design_ok(g1, g2, &cells) {
            return Ok(CrossedDesign {
                g1,
                g2,
                cells,
                meta: DesignMeta {
                    generator: Generator::McarFixedN { g1, g2, n },
                    seed: rng_seed,
                    attempts: attempt + 1,
                },
            });
        }
    }
    Err(Error::DesignGeneration(format!(
        "no connected fixed-n design in {REGEN_LIMIT} attempts (G=({g1},{g2}), n={n})"
    )))
}

/// n observations with i.i.d. uniform cells (repeat observations allowed).
pub fn gen_uniform_cells(g1: usize, g2: usize, n: usize, rng_seed: u64) -> Result<CrossedDesign> {
    let mut rng = rng_from_seed(rng_seed);
    for attempt in 0..REGEN_LIMIT {
        let cells: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.gen_range(0..g1), rng.gen_range(0..g2)))
            .collect();
        if design_ok(g1, g2, &cells) {
            return Ok(CrossedDesign {
                g1,
                g2,
                cells,
                meta: DesignMeta {
                    generator: Generator::UniformCells { g1, g2, n },
                    seed: rng_seed,
                    attempts: attempt + 1,
                },
            });
        }
    }
    Err(Error::DesignGeneration(format!(
        "no connected uniform-cell design in {REGEN_LIMIT} attempts (G=({g1},{g2}), n={n})"
    )))
}

const MATCHING_LIMIT: usize = 1_000;

/// Uniform biregular design: every factor-1 level appears in exactly d1
/// observations and every factor-2 level in exactly d2, no repeated cell.
///
/// Construction is a configuration-model matching of level stubs; repeated
/// cells are then removed by double-edge swaps, which preserve both degree
/// sequences. Pure resample-until-binary rejection has acceptance
/// probability ≈ exp(−(d₁−1)(d₂−1)/2) and is hopeless already at d = 8, so
/// the swap repair is what makes dense degrees feasible.
pub fn gen_biregular(n: usize, d1: usize, d2: usize, rng_seed: u64) -> Result<CrossedDesign> {
    if d1 < 3 || d2 < 3 {
        return Err(Error::Validation("need degrees d₁, d₂ ≥ 3".into()));
    }
    if !n.is_multiple_of(d1) || !n.is_multiple_of(d2) {
        return Err(Error::Validation(format!(
            "both degrees must divide n: n={n}, d₁={d1}, d₂={d2}"
        )));
    }
    if d1 * d2 > n {
        return Err(Error::Validation(format!(
            "no simple design exists: d₁·d₂ = {} exceeds n = {n}",
            d1 * d2
        )));
    }
    let g1 = n / d1;
    let g2 = n / d2;
    if d1 * d2 == n {
        // Density one: the complete design is the only simple member.
        let cells: Vec<(usize, usize)> =
            (0..g1).flat_map(|a| (0..g2).map(move |b| (a, b))).collect();
        return Ok(CrossedDesign {
            g1,
            g2,
            cells,
            meta: DesignMeta {
                generator: Generator::Biregular { n, d1, d2 },
                seed: rng_seed,
                attempts: 1,
            },
        });
    }
    let mut rng = rng_from_seed(rng_seed);
    let left: Vec<usize> = (0..g1).flat_map(|g| std::iter::repeat_n(g, d1)).collect();
    for attempt in 0..MATCHING_LIMIT {
        let mut right: Vec<usize> = (0..g2).flat_map(|h| std::iter::repeat_n(h, d2)).collect();
        right.shuffle(&mut rng);
        let mut cells: Vec<(usize, usize)> = left.iter().copied().zip(right).collect();
        if repair_duplicates(&mut cells, &mut rng) && design_ok(g1, g2, &cells) {
            return Ok(CrossedDesign {
                g1,
                g2,
                cells,
                meta: DesignMeta {
                    generator: Generator::Biregular { n, d1, d2 },
                    seed: rng_seed,
                    attempts: attempt + 1,
                },
            });
        }
    }
    Err(Error::DesignGeneration(format!(
        "no simple biregular design in {MATCHING_LIMIT} attempts (n={n}, d=({d1},{d2}))"
    )))
}

/// Remove repeated cells by double-edge swaps: replace a duplicate (u, v)
/// and a random (x, y) with (u, y), (x, v) when neither new cell exists.
/// Degree sequences are invariant. Returns false if the swap budget runs
/// out before the design is simple.
fn repair_duplicates<R: Rng>(cells: &mut [(usize, usize)], rng: &mut R) -> bool {
    use std::collections::HashMap;
    let n = cells.len();
    let mut counts: HashMap<(usize, usize), usize> = HashMap::with_capacity(n);
    for &c in cells.iter() {
        *counts.entry(c).or_insert(0) += 1;
    }
    let mut dup_idx: Vec<usize> = (0..n).filter(|&i| counts[&cells[i]] > 1).collect();
    let budget = 200 * n.max(1);
    for _ in 0..budget {
        dup_idx.retain(|&i| counts[&cells[i]] > 1);
        let Some(&i) = dup_idx.last() else {
            return true;
        };
        let j = rng.gen_range(0..n);
        if j == i {
            continue;
        }
        let (u, v) = cells[i];
        let (x, y) = cells[j];
        if v == y || u == x {
            continue;
        }
        let new_a = (u, y);
        let new_b = (x, v);
        if counts.get(&new_a).copied().unwrap_or(0) > 0
            || counts.get(&new_b).copied().unwrap_or(0) > 0
        {
            continue;
        }
        *counts.get_mut(&(u, v)).unwrap() -= 1;
        *counts.get_mut(&(x, y)).unwrap() -= 1;
        *counts.entry(new_a).or_insert(0) += 1;
        *counts.entry(new_b).or_insert(0) += 1;
        // Swaps never create a duplicate (both new cells were absent), so
        // the initial duplicate index list remains a superset.
        cells[i] = new_a;
        cells[j] = new_b;
    }
    cells
        .iter()
        .all(|c| counts.get(c).copied().unwrap_or(0) <= 1)
}

/// Ground truth recorded with simulated responses.
#[derive(Debug, Clone, Serialize)]
pub struct GroundTruth {
    pub intercept: f64,
    pub sigma: f64,
    pub variances: Vec<f64>,
    pub effects: Vec<Vec<f64>>,
}

/// Response-generation knobs; defaults mirror the simulation-study setup:
/// variances from InverseGamma(1, 0.5), σ = 1, binomial trials n_i = 1.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub likelihood: Likelihood,
    pub prior_shape: f64,
    pub prior_rate: f64,
    pub sigma: f64,
    pub trials: u64,
    /// Test hook: pin the variance components instead of drawing them.
    pub forced_variances: Option<Vec<f64>>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            likelihood: Likelihood::Gaussian,
            prior_shape: 1.0,
            prior_rate: 0.5,
            sigma: 1.0,
            trials: 1,
            forced_variances: None,
        }
    }
}

/// Draw variance components from the prior, effects from their normals and
/// responses from the model; the ground truth is returned alongside.
pub fn simulate_responses(
    design: &CrossedDesign,
    opts: &SimOptions,
    rng_seed: u64,
) -> Result<(MixedModelData, GroundTruth)> {
    let n = design.n();
    let mut rng = rng_from_seed(rng_seed);
    let levels = [design.g1, design.g2];
    let variances: Vec<f64> = match &opts.forced_variances {
        Some(v) => {
            if v.len() != 2 {
                return Err(Error::Validation("need one forced variance per factor".into()));
            }
            v.clone()
        }
        None => (0..2)
            // InverseGamma(shape, rate): reciprocal of Gamma(shape, 1/rate).
            .map(|_| 1.0 / Gamma::new(opts.prior_shape, 1.0 / opts.prior_rate).unwrap().sample(&mut rng))
            .collect(),
    };
    let intercept: f64 = rng.sample(StandardNormal);
    // γ = σ² under the Gaussian likelihood, γ = 1 under the binomial.
    let gamma = match opts.likelihood {
        Likelihood::Gaussian => opts.sigma * opts.sigma,
        Likelihood::Binomial => 1.0,
    };
    let effects: Vec<Vec<f64>> = (0..2)
        .map(|k| {
            let sd = (gamma * variances[k]).sqrt();
            (0..levels[k])
                .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();

    let mut y = DVector::zeros(n);
    let trials = vec![opts.trials; n];
    for (i, &(a, b)) in design.cells.iter().enumerate() {
        let eta = intercept + effects[0][a] + effects[1][b];
        y[i] = match opts.likelihood {
            Likelihood::Gaussian => eta + opts.sigma * rng.sample::<f64, _>(StandardNormal),
            Likelihood::Binomial => {
                let prob = 1.0 / (1.0 + (-eta).exp());
                (0..opts.trials).filter(|_| rng.gen::<f64>() < prob).count() as f64
            }
        };
    }

    let data = MixedModelData::new(
        y,
        trials,
        DMatrix::from_element(n, 1, 1.0),
        vec![
            FactorSpec::intercept_only("f1", design.g1),
            FactorSpec::intercept_only("f2", design.g2),
        ],
        vec![
            design.cells.iter().map(|c| c.0).collect(),
            design.cells.iter().map(|c| c.1).collect(),
        ],
        vec![
            DMatrix::from_element(n, 1, 1.0),
            DMatrix::from_element(n, 1, 1.0),
        ],
        opts.likelihood,
    )?;
    Ok((
        data,
        GroundTruth {
            intercept,
            sigma: opts.sigma,
            variances,
            effects,
        },
    ))
}

/// How the grid computes UQF per fit.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum UqfMode {
    /// Split-sample estimator against blocked-Gibbs posterior draws
    /// (Gaussian likelihood only).
    SplitSampleGibbs {
        iters: usize,
        burn_in: usize,
        folds: usize,
        top: usize,
    },
    /// Analytic UQF against the Gaussian target at the converged q(φ);
    /// reported as fixed-φ UQF.
    FixedPhiAnalytic,
    Skip,
}

#[derive(Debug, Clone, Serialize)]
pub struct GridConfig {
    pub likelihood: Likelihood,
    pub g_grid: Vec<usize>,
    pub missing_prob: f64,
    pub replicates: usize,
    pub prior_shape: f64,
    pub prior_rate: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub seed: u64,
    pub jobs: usize,
    pub uqf: UqfMode,
    pub dense_guard: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            likelihood: Likelihood::Gaussian,
            g_grid: vec![32, 64, 128, 256],
            missing_prob: 0.9,
            replicates: 20,
            prior_shape: 1.0,
            prior_rate: 0.5,
            tol: 1e-6,
            max_iter: 500,
            seed: 0,
            jobs: 1,
            uqf: UqfMode::FixedPhiAnalytic,
            dense_guard: DENSE_GUARD_DEFAULT,
        }
    }
}

/// One aggregated experiment row (mean over replicates).
#[derive(Debug, Clone, Serialize)]
pub struct ExperimentRow {
    pub g: usize,
    pub family: String,
    pub partition: String,
    pub replicates: usize,
    pub mean_n: f64,
    pub mean_parameters: f64,
    pub mean_uqf: Option<f64>,
    pub uqf_method: String,
    pub mean_time_per_iter_s: f64,
    pub mean_iterations: f64,
    pub converged: usize,
    pub failures: usize,
}

struct ReplicateOutcome {
    n: usize,
    parameters: usize,
    uqf: Option<f64>,
    time_per_iter_s: f64,
    iterations: usize,
    converged: bool,
}

fn grid_families(num_blocks: usize) -> Vec<(&'static str, Partition)> {
    vec![
        ("ff", Partition::fully_factorized(num_blocks)),
        ("pf", Partition::collapse_fixed(num_blocks)),
        ("uf", Partition::unfactorized(num_blocks)),
    ]
}

fn run_replicate(
    config: &GridConfig,
    g: usize,
    family: &str,
    part: &Partition,
    replicate: usize,
) -> Result<ReplicateOutcome> {
    let design_seed = derive_seed(config.seed, &[g as u64, replicate as u64, 1]);
    let design = gen_crossed_mcar(g, g, config.missing_prob, design_seed)?;
    let sim_seed = derive_seed(config.seed, &[g as u64, replicate as u64, 2]);
    let (data, _truth) = simulate_responses(
        &design,
        &SimOptions {
            likelihood: config.likelihood,
            prior_shape: config.prior_shape,
            prior_rate: config.prior_rate,
            ..Default::default()
        },
        sim_seed,
    )?;
    let prior = PriorSpec::scalar_inverse_gamma(2, config.prior_shape, config.prior_rate);
    let opts = FitOptions {
        tol: config.tol,
        max_iter: config.max_iter,
        fix_phi: false,
        dense_guard: config.dense_guard,
    };
    let started = Instant::now();
    let res = fit(&data, config.likelihood, &prior, part, &opts)?;
    let elapsed = started.elapsed().as_secs_f64();
    let time_per_iter = elapsed / res.iterations.max(1) as f64;

    let uqf = match (&config.uqf, config.likelihood) {
        (UqfMode::Skip, _) => None,
        (UqfMode::FixedPhiAnalytic, _) => {
            let (_, cov_pi) = res
                .state
                .surrogate()
                .dense_joint_moments_with_guard(config.dense_guard)?;
            let qhat = res.state.export_q_precision_with_guard(config.dense_guard)?;
            Some(uqf_analytic(&cov_pi, &qhat)?)
        }
        (
            UqfMode::SplitSampleGibbs {
                iters,
                burn_in,
                folds,
                top,
            },
            Likelihood::Gaussian,
        ) => {
            let gibbs_seed = derive_seed(config.seed, &[g as u64, replicate as u64, 3]);
            let draws = gibbs_gaussian(
                &data,
                &prior,
                &GibbsOptions {
                    iters: *iters,
                    burn_in: *burn_in,
                    thin: 1,
                    seed: gibbs_seed,
                    fix_variances: false,
                    dense_guard: config.dense_guard,
                },
            )?;
            let qhat = res.state.export_q_precision_with_guard(config.dense_guard)?;
            let fold_seed = derive_seed(config.seed, &[g as u64, replicate as u64, 4]);
            Some(uqf_split_sample(&draws.theta, &qhat, *folds, *top, fold_seed)?.value)
        }
        (UqfMode::SplitSampleGibbs { .. }, Likelihood::Binomial) => {
            // No binomial sampling oracle; fall back to fixed-φ analytic.
            let (_, cov_pi) = res
                .state
                .surrogate()
                .dense_joint_moments_with_guard(config.dense_guard)?;
            let qhat = res.state.export_q_precision_with_guard(config.dense_guard)?;
            Some(uqf_analytic(&cov_pi, &qhat)?)
        }
    };
    let _ = family;
    Ok(ReplicateOutcome {
        n: data.n,
        parameters: data.total_dim(),
        uqf,
        time_per_iter_s: time_per_iter,
        iterations: res.iterations,
        converged: res.converged,
    })
}

/// Run the UQF/time grid over G values and families. Work items fan out to
/// `jobs` worker threads; replicate seeds derive from (seed, G, replicate),
/// so results are independent of scheduling.
pub fn run_grid(config: &GridConfig) -> Result<Vec<ExperimentRow>> {
    let families = grid_families(3);
    let mut items: Vec<(usize, usize, usize)> = Vec::new(); // (g, family_idx, replicate)
    for &g in &config.g_grid {
        for f in 0..families.len() {
            for r in 0..config.replicates {
                items.push((g, f, r));
            }
        }
    }
    let results: Vec<Option<(usize, usize, Result<ReplicateOutcome>)>> = {
        let mut slots: Vec<Option<(usize, usize, Result<ReplicateOutcome>)>> =
            (0..items.len()).map(|_| None).collect();
        let jobs = config.jobs.max(1);
        if jobs == 1 {
            for (slot, &(g, f, r)) in slots.iter_mut().zip(&items) {
                let (name, part) = &families[f];
                *slot = Some((g, f, run_replicate(config, g, name, part, r)));
            }
        } else {
            let next = std::sync::atomic::AtomicUsize::new(0);
            let slots_mutex = std::sync::Mutex::new(&mut slots);
            std::thread::scope(|scope| {
                for _ in 0..jobs {
                    scope.spawn(|| loop {
                        let idx = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                        if idx >= items.len() {
                            break;
                        }
                        let (g, f, r) = items[idx];
                        let (name, part) = &families[f];
                        let out = run_replicate(config, g, name, part, r);
                        let mut guard = slots_mutex.lock().unwrap();
                        guard[idx] = Some((g, f, out));
                    });
                }
            });
        }
        slots
    };

    let mut rows = Vec::new();
    for &g in &config.g_grid {
        for (f, (name, part)) in families.iter().enumerate() {
            let outcomes: Vec<&Result<ReplicateOutcome>> = results
                .iter()
                .flatten()
                .filter(|(gg, ff, _)| *gg == g && *ff == f)
                .map(|(_, _, o)| o)
                .collect();
            let ok: Vec<&ReplicateOutcome> = outcomes.iter().filter_map(|o| o.as_ref().ok()).collect();
            let failures = outcomes.len() - ok.len();
            let mean =
                |f: &dyn Fn(&ReplicateOutcome) -> f64| -> f64 {
                    if ok.is_empty() {
                        f64::NAN
                    } else {
                        ok.iter().map(|o| f(o)).sum::<f64>() / ok.len() as f64
                    }
                };
            let uqf_values: Vec<f64> = ok.iter().filter_map(|o| o.uqf).collect();
            rows.push(ExperimentRow {
                g,
                family: name.to_string(),
                partition: part.label(),
                replicates: outcomes.len(),
                mean_n: mean(&|o| o.n as f64),
                mean_parameters: mean(&|o| o.parameters as f64),
                mean_uqf: if uqf_values.is_empty() {
                    None
                } else {
                    Some(uqf_values.iter().sum::<f64>() / uqf_values.len() as f64)
                },
                uqf_method: match (&config.uqf, config.likelihood) {
                    (UqfMode::Skip, _) => "skip".into(),
                    (UqfMode::FixedPhiAnalytic, _) => "fixed_phi_analytic".into(),
                    (UqfMode::SplitSampleGibbs { .. }, Likelihood::Gaussian) => {
                        "split_sample_gibbs".into()
                    }
                    (UqfMode::SplitSampleGibbs { .. }, Likelihood::Binomial) => {
                        "fixed_phi_analytic".into()
                    }
                },
                mean_time_per_iter_s: mean(&|o| o.time_per_iter_s),
                mean_iterations: mean(&|o| o.iterations as f64),
                converged: ok.iter().filter(|o| o.converged).count(),
                failures,
            });
        }
    }
    Ok(rows)
}

/// Write the experiment table as CSV.
pub fn write_experiment_csv(rows: &[ExperimentRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "g",
        "family",
        "partition",
        "replicates",
        "mean_n",
        "mean_parameters",
        "mean_uqf",
        "uqf_method",
        "mean_time_per_iter_s",
        "mean_iterations",
        "converged",
        "failures",
    ])?;
    for r in rows {
        w.write_record([
            r.g.to_string(),
            r.family.clone(),
            r.partition.clone(),
            r.replicates.to_string(),
            format!("{:.6}", r.mean_n),
            format!("{:.6}", r.mean_parameters),
            r.mean_uqf.map(|v| format!("{v:.12}")).unwrap_or_default(),
            r.uqf_method.clone(),
            format!("{:.9}", r.mean_time_per_iter_s),
            format!("{:.3}", r.mean_iterations),
            r.converged.to_string(),
            r.failures.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Deterministic (timing excluded) serialization used by reproducibility
/// checks: every statistical column, bit-exact.
pub fn experiment_stat_digest(rows: &[ExperimentRow]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&format!(
            "{}|{}|{}|{}|{:.17e}|{:.17e}|{}|{}|{}|{}\n",
            r.g,
            r.family,
            r.partition,
            r.replicates,
            r.mean_n,
            r.mean_parameters,
            r.mean_uqf.map(|v| format!("{v:.17e}")).unwrap_or_default(),
            r.mean_iterations,
            r.converged,
            r.failures,
        ));
    }
    out
}

/// Median wall-clock seconds per sweep over `reps` timed fits of
/// `sweeps` forced sweeps each.
pub fn median_sweep_time(
    data: &MixedModelData,
    lik: Likelihood,
    prior: &PriorSpec,
    part: &Partition,
    sweeps: usize,
    reps: usize,
) -> Result<f64> {
    // One untimed fit warms caches and the allocator.
    let warmup = FitOptions {
        tol: -1.0,
        max_iter: 1,
        fix_phi: false,
        dense_guard: usize::MAX,
    };
    fit(data, lik, prior, part, &warmup)?;
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let opts = FitOptions {
            tol: -1.0,
            max_iter: sweeps,
            fix_phi: false,
            dense_guard: usize::MAX,
        };
        let started = Instant::now();
        let res = fit(data, lik, prior, part, &opts)?;
        times.push(started.elapsed().as_secs_f64() / res.iterations as f64);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}
