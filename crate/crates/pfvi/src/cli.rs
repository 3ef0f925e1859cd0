//! Command-line surface: fit models, simulate designs, compute metrics and
//! bounds, run experiment grids and random-scan trajectories.
//!
//! Every subcommand is deterministic given its flags (all randomness flows
//! from `--seed` through counter-based derivation) and stamps its outputs
//! with a hash of the resolved configuration. Fatal errors print one
//! machine-readable JSON object on stderr and exit nonzero.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::bounds::{bounds_report, raw_counts, scalar_penalties, weighted_counts, DesignCounts};
use crate::cavi::{fit, FitOptions};
use crate::error::{Error, Result};
use crate::gibbs::{
    export_draws_csv, gibbs_gaussian, load_draws, model_hash, save_draws, GibbsOptions,
};
use crate::linalg::DENSE_GUARD_DEFAULT;
use crate::model::{load_long_csv, validate_model, DataSchema, Likelihood, MixedModelData, PriorSpec};
use crate::rng::{derive_seed, rng_from_seed};
use crate::rs_lab::{duality_check, normalized_lab, write_trajectory_csv, GaussianTarget, StartPoint};
use crate::sim::{
    gen_biregular, gen_crossed_mcar, gen_uniform_cells, run_grid, simulate_responses,
    write_experiment_csv, GridConfig, SimOptions, UqfMode,
};
use crate::surrogate::Partition;
use crate::uqf::{tv_accuracy, uqf_analytic, uqf_split_sample, MetricsReport, TvScore, UqfEstimate, UqfMethod};

#[derive(Debug, Parser)]
#[command(
    name = "pfvi",
    about = "Variational inference for high-dimensional mixed models",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a variational approximation to a mixed model.
    Fit(FitArgs),
    /// Generate a simulated design and responses.
    Simulate(SimulateArgs),
    /// Uncertainty quantification fraction and TV accuracy of a fit.
    Uqf(UqfArgs),
    /// Design diagnostics: balancedness, spectral gap, UQF bounds.
    Bounds(BoundsArgs),
    /// Blocked Gibbs posterior draws (Gaussian likelihood).
    Gibbs(GibbsArgs),
    /// UQF-versus-dimension and time-per-iteration grid.
    Experiment(ExperimentArgs),
    /// Random-scan coordinate ascent trajectories on a Gaussian target.
    RsLab(RsLabArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct FitArgs {
    /// Long-format CSV with a header row.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON column-role map.
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value = "gaussian")]
    pub likelihood: String,
    /// ff | uf | pf:fixed | pf:auto | pf:<blocks> (ids or factor names).
    #[arg(long, default_value = "pf:fixed")]
    pub partition: String,
    /// Absolute ELBO-change stopping tolerance.
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Per-factor inverse-gamma prior shape (df/2 for D_k = 1).
    #[arg(long, default_value_t = 1.0)]
    pub prior_shape: f64,
    /// Per-factor inverse-gamma prior rate.
    #[arg(long, default_value_t = 0.5)]
    pub prior_rate: f64,
    #[arg(long, default_value = "fit.json")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Validate and print the resolved plan without fitting.
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    /// mcar | biregular | uniform
    #[arg(long, default_value = "mcar")]
    pub generator: String,
    #[arg(long, default_value_t = 32)]
    pub g1: usize,
    #[arg(long, default_value_t = 32)]
    pub g2: usize,
    #[arg(long, default_value_t = 0.9)]
    pub missing_prob: f64,
    /// Observation count (uniform generator) or total size (biregular).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, default_value_t = 8)]
    pub d1: usize,
    #[arg(long, default_value_t = 8)]
    pub d2: usize,
    #[arg(long, default_value = "gaussian")]
    pub likelihood: String,
    #[arg(long, default_value_t = 1)]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "sim")]
    #[serde(skip)]
    pub out_dir: PathBuf,
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct UqfArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value = "gaussian")]
    pub likelihood: String,
    #[arg(long, default_value = "pf:fixed")]
    pub partition: String,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub prior_shape: f64,
    #[arg(long, default_value_t = 0.5)]
    pub prior_rate: f64,
    /// Prefix of persisted posterior draws (`<prefix>.bin` + `.json`);
    /// omit to compute the fixed-φ analytic UQF instead.
    #[arg(long)]
    pub draws: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub folds: usize,
    #[arg(long, default_value_t = 50)]
    pub top: usize,
    /// Also compute per-coordinate TV accuracy against the draws.
    #[arg(long, default_value_t = false)]
    pub tv: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "metrics.json")]
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct BoundsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value = "gaussian")]
    pub likelihood: String,
    /// Partition used for the preliminary fit that sets the weights.
    #[arg(long, default_value = "pf:fixed")]
    pub partition: String,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 1.0)]
    pub prior_shape: f64,
    #[arg(long, default_value_t = 0.5)]
    pub prior_rate: f64,
    /// Evaluate at the initial q(φ) instead of fitting first.
    #[arg(long, default_value_t = false)]
    pub at_init: bool,
    #[arg(long, default_value = "bounds.json")]
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GibbsArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub schema: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    pub iters: usize,
    #[arg(long, default_value_t = 1_000)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 1)]
    pub thin: usize,
    #[arg(long, default_value_t = 1.0)]
    pub prior_shape: f64,
    #[arg(long, default_value_t = 0.5)]
    pub prior_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output prefix: writes `<out>.bin` and `<out>.json`.
    #[arg(long, default_value = "draws")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Also export `<out>.csv`.
    #[arg(long, default_value_t = false)]
    pub csv: bool,
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct ExperimentArgs {
    /// Comma-separated level counts, e.g. 32,64,128.
    #[arg(long, default_value = "32,64")]
    pub g_grid: String,
    #[arg(long, default_value_t = 20)]
    pub replicates: usize,
    #[arg(long, default_value_t = 0.9)]
    pub missing_prob: f64,
    #[arg(long, default_value = "gaussian")]
    pub likelihood: String,
    /// fixed-phi | split-gibbs | skip
    #[arg(long, default_value = "fixed-phi")]
    pub uqf_mode: String,
    #[arg(long, default_value_t = 2_000)]
    pub gibbs_iters: usize,
    #[arg(long, default_value_t = 500)]
    pub gibbs_burn_in: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long, default_value = "experiment.csv")]
    #[serde(skip)]
    pub out: PathBuf,
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct RsLabArgs {
    /// Comma-separated block sizes of a random Gaussian target.
    #[arg(long, default_value = "2,3,3")]
    pub blocks: String,
    /// Comma-separated collapsed block ids (empty = fully factorized).
    #[arg(long, default_value = "")]
    pub collapse: String,
    #[arg(long, default_value_t = 20)]
    pub sweeps: usize,
    #[arg(long, default_value_t = 1_000)]
    pub runs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Trajectory CSV path.
    #[arg(long, default_value = "trajectories.csv")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Duality report path.
    #[arg(long, default_value = "rs_report.json")]
    #[serde(skip)]
    pub report: PathBuf,
    /// Number of individual trajectories to record in the CSV.
    #[arg(long, default_value_t = 16)]
    pub record_runs: usize,
    #[serde(skip)]
    #[arg(long, default_value_t = false)]
    pub dry_run: bool,
}

/// Hash of the resolved, serialized configuration.
fn config_hash<T: Serialize>(config: &T) -> Result<String> {
    let canonical = serde_json::to_string(config)?;
    let mut hasher = Sha256::new();
    hasher.update(canonical.as_bytes());
    let digest = hasher.finalize();
    Ok(digest
        .iter()
        .take(16)
        .map(|b| format!("{b:02x}"))
        .collect())
}

fn parse_likelihood(s: &str) -> Result<Likelihood> {
    s.parse()
}

/// Resolve a partition spec string against the model's factors.
///
/// `pf:auto` collapses the fixed effects plus every factor that has some
/// other factor nested inside it (each level of the inner factor
/// co-occurring with exactly one level of the outer), detected exactly
/// from the zero pattern of the pair counts.
pub fn resolve_partition(
    spec: &str,
    data: &MixedModelData,
    counts: Option<&DesignCounts>,
) -> Result<Partition> {
    let num_blocks = data.num_factors() + 1;
    match spec {
        "ff" => Partition::new(vec![], num_blocks),
        "uf" => Partition::new((0..num_blocks).collect(), num_blocks),
        "pf:fixed" => Partition::new(vec![0], num_blocks),
        "pf:auto" => {
            let counts = counts.ok_or_else(|| {
                Error::Validation("pf:auto needs design counts (random intercepts)".into())
            })?;
            let mut collapsed = vec![0usize];
            for k in 1..num_blocks {
                if (1..num_blocks).any(|other| other != k && nested_inside(counts, other, k)) {
                    collapsed.push(k);
                }
            }
            Partition::new(collapsed, num_blocks)
        }
        other => {
            let rest = other.strip_prefix("pf:").ok_or_else(|| {
                Error::Validation(format!(
                    "unknown partition spec `{other}` (expected ff, uf, pf:fixed, pf:auto or pf:<blocks>)"
                ))
            })?;
            let mut collapsed = Vec::new();
            for token in rest.split(',').filter(|t| !t.is_empty()) {
                if let Ok(id) = token.parse::<usize>() {
                    collapsed.push(id);
                } else {
                    let idx = data
                        .factors
                        .iter()
                        .position(|f| f.name == token)
                        .ok_or_else(|| {
                            Error::Validation(format!("unknown factor `{token}` in partition spec"))
                        })?;
                    collapsed.push(idx + 1);
                }
            }
            Partition::new(collapsed, num_blocks)
        }
    }
}

/// Factor `inner` is nested inside `outer` iff every level of `inner`
/// co-occurs with exactly one level of `outer` (blocks are 1-based).
fn nested_inside(counts: &DesignCounts, inner: usize, outer: usize) -> bool {
    let (fi, fo) = (inner - 1, outer - 1);
    if fi == fo {
        return false;
    }
    if fi < fo {
        // pair(fi, fo): G_inner × G_outer; each inner row hits one column.
        let m = counts.pair(fi, fo).unwrap();
        (0..m.nrows()).all(|r| m.row(r).iter().filter(|&&v| v > 0.0).count() == 1)
    } else {
        let m = counts.pair(fo, fi).unwrap();
        (0..m.ncols()).all(|c| m.column(c).iter().filter(|&&v| v > 0.0).count() == 1)
    }
}

fn load_inputs(
    data_path: &Path,
    schema_path: &Path,
    lik: Likelihood,
    prior_shape: f64,
    prior_rate: f64,
) -> Result<(MixedModelData, PriorSpec, Vec<String>)> {
    let schema: DataSchema = serde_json::from_str(&std::fs::read_to_string(schema_path)?)?;
    let data = load_long_csv(data_path, &schema, lik)?;
    let prior = PriorSpec::scalar_inverse_gamma(data.num_factors(), prior_shape, prior_rate);
    let report = validate_model(&data, &prior, lik);
    if report.is_fatal() {
        return Err(Error::Validation(report.errors.join("; ")));
    }
    Ok((data, prior, report.warnings))
}

#[derive(Serialize)]
struct DryRunPlan<'a, T: Serialize> {
    command: &'a str,
    config: &'a T,
    config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    partition: Option<String>,
}

fn print_plan<T: Serialize>(command: &str, config: &T, partition: Option<String>) -> Result<()> {
    let plan = DryRunPlan {
        command,
        config,
        config_hash: config_hash(config)?,
        partition,
    };
    println!("{}", serde_json::to_string_pretty(&plan)?);
    Ok(())
}

#[derive(Serialize)]
struct FitOutput {
    config_hash: String,
    warnings: Vec<String>,
    #[serde(flatten)]
    report: crate::cavi::FitReport,
}

fn cmd_fit(args: &FitArgs) -> Result<()> {
    let lik = parse_likelihood(&args.likelihood)?;
    let (data, prior, warnings) =
        load_inputs(&args.data, &args.schema, lik, args.prior_shape, args.prior_rate)?;
    let counts = raw_counts(&data).ok();
    let part = resolve_partition(&args.partition, &data, counts.as_ref())?;
    if args.dry_run {
        return print_plan("fit", args, Some(part.label()));
    }
    let opts = FitOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        fix_phi: false,
        dense_guard: DENSE_GUARD_DEFAULT,
    };
    let res = fit(&data, lik, &prior, &part, &opts)?;
    let out = FitOutput {
        config_hash: config_hash(args)?,
        warnings,
        report: res.state.report(res.iterations, res.converged)?,
    };
    std::fs::write(&args.out, serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<()> {
    let lik = parse_likelihood(&args.likelihood)?;
    if args.dry_run {
        return print_plan("simulate", args, None);
    }
    let design = match args.generator.as_str() {
        "mcar" => gen_crossed_mcar(args.g1, args.g2, args.missing_prob, args.seed)?,
        "biregular" => {
            let n = args.n.ok_or_else(|| {
                Error::Validation("biregular generator needs --n".into())
            })?;
            gen_biregular(n, args.d1, args.d2, args.seed)?
        }
        "uniform" => {
            let n = args.n.ok_or_else(|| {
                Error::Validation("uniform generator needs --n".into())
            })?;
            gen_uniform_cells(args.g1, args.g2, n, args.seed)?
        }
        other => {
            return Err(Error::Validation(format!(
                "unknown generator `{other}` (expected mcar, biregular or uniform)"
            )))
        }
    };
    let opts = SimOptions {
        likelihood: lik,
        trials: args.trials,
        ..Default::default()
    };
    let (data, truth) = simulate_responses(&design, &opts, derive_seed(args.seed, &[1]))?;

    std::fs::create_dir_all(&args.out_dir)?;
    // Long CSV with zero-padded level labels so lexicographic level
    // indexing matches the generator's numbering.
    let mut w = csv::Writer::from_path(args.out_dir.join("data.csv"))?;
    let mut header = vec!["y".to_string()];
    if lik == Likelihood::Binomial {
        header.push("trials".into());
    }
    header.push("f1".into());
    header.push("f2".into());
    w.write_record(&header)?;
    for i in 0..data.n {
        let mut rec = vec![format!("{:.17e}", data.y[i])];
        if lik == Likelihood::Binomial {
            rec.push(data.trials[i].to_string());
        }
        rec.push(format!("l{:06}", data.memberships[0][i]));
        rec.push(format!("l{:06}", data.memberships[1][i]));
        w.write_record(&rec)?;
    }
    w.flush()?;

    let schema = DataSchema {
        response: "y".into(),
        trials: (lik == Likelihood::Binomial).then(|| "trials".into()),
        fixed: vec![],
        factors: vec![
            crate::model::FactorSchema {
                name: "f1".into(),
                slopes: vec![],
            },
            crate::model::FactorSchema {
                name: "f2".into(),
                slopes: vec![],
            },
        ],
        intercept: true,
    };
    std::fs::write(
        args.out_dir.join("schema.json"),
        serde_json::to_string_pretty(&schema)?,
    )?;
    #[derive(Serialize)]
    struct SimOutput<'a> {
        config_hash: String,
        meta: &'a crate::sim::DesignMeta,
        truth: &'a crate::sim::GroundTruth,
    }
    std::fs::write(
        args.out_dir.join("truth.json"),
        serde_json::to_string_pretty(&SimOutput {
            config_hash: config_hash(args)?,
            meta: &design.meta,
            truth: &truth,
        })?,
    )?;
    Ok(())
}

fn cmd_uqf(args: &UqfArgs) -> Result<()> {
    let lik = parse_likelihood(&args.likelihood)?;
    let (data, prior, _warnings) =
        load_inputs(&args.data, &args.schema, lik, args.prior_shape, args.prior_rate)?;
    let counts = raw_counts(&data).ok();
    let part = resolve_partition(&args.partition, &data, counts.as_ref())?;
    if args.dry_run {
        return print_plan("uqf", args, Some(part.label()));
    }
    let opts = FitOptions {
        tol: args.tol,
        max_iter: args.max_iter,
        fix_phi: false,
        dense_guard: DENSE_GUARD_DEFAULT,
    };
    let res = fit(&data, lik, &prior, &part, &opts)?;
    let q_precision = res.state.export_q_precision()?;

    let (uqf, tv) = match &args.draws {
        Some(prefix) => {
            let (theta, sidecar) = load_draws(prefix)?;
            if sidecar.model_hash != model_hash(&data) {
                return Err(Error::Validation(
                    "draws were produced for different data (model hash mismatch)".into(),
                ));
            }
            let est = uqf_split_sample(
                &theta,
                &q_precision,
                args.folds,
                args.top,
                derive_seed(args.seed, &[7]),
            )?;
            let tv = if args.tv {
                let mut rng = rng_from_seed(derive_seed(args.seed, &[8]));
                let s = theta.nrows();
                let mut q_draws = nalgebra::DMatrix::zeros(s, theta.ncols());
                for i in 0..s {
                    let draw = res.state.sample_theta(&mut rng)?;
                    for j in 0..theta.ncols() {
                        q_draws[(i, j)] = draw[j];
                    }
                }
                (0..theta.ncols())
                    .map(|j| {
                        let pi_col: Vec<f64> = theta.column(j).iter().copied().collect();
                        let q_col: Vec<f64> = q_draws.column(j).iter().copied().collect();
                        Ok(TvScore {
                            quantity: format!("theta_{j}"),
                            accuracy: tv_accuracy(&pi_col, &q_col)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
            } else {
                Vec::new()
            };
            (est, tv)
        }
        None => {
            // Fixed-φ analytic UQF against the Gaussian target at the
            // converged q(φ).
            let (_, cov_pi) = res.state.surrogate().dense_joint_moments()?;
            let value = uqf_analytic(&cov_pi, &q_precision)?;
            (
                UqfEstimate {
                    value,
                    method: UqfMethod::Analytic,
                    fold_values: vec![],
                    eigvec_count: 0,
                },
                Vec::new(),
            )
        }
    };
    #[derive(Serialize)]
    struct MetricsOutput {
        config_hash: String,
        partition: String,
        #[serde(flatten)]
        metrics: MetricsReport,
    }
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&MetricsOutput {
            config_hash: config_hash(args)?,
            partition: part.label(),
            metrics: MetricsReport { uqf, tv },
        })?,
    )?;
    Ok(())
}

fn cmd_bounds(args: &BoundsArgs) -> Result<()> {
    let lik = parse_likelihood(&args.likelihood)?;
    let (data, prior, _warnings) =
        load_inputs(&args.data, &args.schema, lik, args.prior_shape, args.prior_rate)?;
    let counts_raw = raw_counts(&data)?;
    let part = resolve_partition(&args.partition, &data, Some(&counts_raw))?;
    if args.dry_run {
        return print_plan("bounds", args, Some(part.label()));
    }
    let opts = FitOptions {
        tol: args.tol,
        max_iter: if args.at_init { 1 } else { args.max_iter },
        fix_phi: args.at_init,
        dense_guard: DENSE_GUARD_DEFAULT,
    };
    let res = fit(&data, lik, &prior, &part, &opts)?;
    let s = res.state.surrogate();
    let counts = weighted_counts(s, &data)?;
    let t = scalar_penalties(s)?;
    let report = bounds_report(&counts, &t, data.n)?;
    #[derive(Serialize)]
    struct BoundsOutput {
        config_hash: String,
        partition: String,
        #[serde(flatten)]
        report: crate::bounds::BoundsReport,
    }
    std::fs::write(
        &args.out,
        serde_json::to_string_pretty(&BoundsOutput {
            config_hash: config_hash(args)?,
            partition: part.label(),
            report,
        })?,
    )?;
    Ok(())
}

fn cmd_gibbs(args: &GibbsArgs) -> Result<()> {
    let (data, prior, _warnings) = load_inputs(
        &args.data,
        &args.schema,
        Likelihood::Gaussian,
        args.prior_shape,
        args.prior_rate,
    )?;
    if args.dry_run {
        return print_plan("gibbs", args, None);
    }
    let draws = gibbs_gaussian(
        &data,
        &prior,
        &GibbsOptions {
            iters: args.iters,
            burn_in: args.burn_in,
            thin: args.thin,
            seed: args.seed,
            fix_variances: false,
            dense_guard: DENSE_GUARD_DEFAULT,
        },
    )?;
    save_draws(&draws, &data, &args.out)?;
    if args.csv {
        export_draws_csv(&draws, &args.out.with_extension("csv"))?;
    }
    Ok(())
}

fn cmd_experiment(args: &ExperimentArgs) -> Result<()> {
    let lik = parse_likelihood(&args.likelihood)?;
    let g_grid: Vec<usize> = args
        .g_grid
        .split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad grid entry `{t}`")))
        })
        .collect::<Result<_>>()?;
    let uqf = match args.uqf_mode.as_str() {
        "fixed-phi" => UqfMode::FixedPhiAnalytic,
        "split-gibbs" => UqfMode::SplitSampleGibbs {
            iters: args.gibbs_iters,
            burn_in: args.gibbs_burn_in,
            folds: 5,
            top: 50,
        },
        "skip" => UqfMode::Skip,
        other => {
            return Err(Error::Validation(format!(
                "unknown uqf mode `{other}` (expected fixed-phi, split-gibbs or skip)"
            )))
        }
    };
    let config = GridConfig {
        likelihood: lik,
        g_grid,
        missing_prob: args.missing_prob,
        replicates: args.replicates,
        tol: args.tol,
        max_iter: args.max_iter,
        seed: args.seed,
        jobs: args.jobs,
        uqf,
        ..Default::default()
    };
    if args.dry_run {
        return print_plan("experiment", args, None);
    }
    let rows = run_grid(&config)?;
    write_experiment_csv(&rows, &args.out)?;
    #[derive(Serialize)]
    struct Manifest<'a> {
        config_hash: String,
        config: &'a GridConfig,
        version: &'static str,
    }
    let manifest_path = args.out.with_extension("manifest.json");
    std::fs::write(
        manifest_path,
        serde_json::to_string_pretty(&Manifest {
            config_hash: config_hash(args)?,
            config: &config,
            version: env!("CARGO_PKG_VERSION"),
        })?,
    )?;
    Ok(())
}

fn cmd_rs_lab(args: &RsLabArgs) -> Result<()> {
    let blocks: Vec<usize> = args
        .blocks
        .split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad block size `{t}`")))
        })
        .collect::<Result<_>>()?;
    let collapsed: Vec<usize> = args
        .collapse
        .split(',')
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| Error::Validation(format!("bad collapsed block `{t}`")))
        })
        .collect::<Result<_>>()?;
    if args.dry_run {
        return print_plan("rs-lab", args, None);
    }
    let mut rng = rng_from_seed(derive_seed(args.seed, &[11]));
    let target = GaussianTarget::random(&blocks, &mut rng);
    let part = Partition::new(collapsed, blocks.len())?;
    let report = duality_check(&target, &part, args.sweeps, args.runs, args.seed)?;

    let lab = normalized_lab(&target, &part)?;
    let trajectories: Vec<_> = (0..args.record_runs.min(args.runs))
        .map(|r| lab.random_scan(args.sweeps, derive_seed(args.seed, &[r as u64]), &StartPoint::MinEigvec))
        .collect();
    let file = std::fs::File::create(&args.out)?;
    write_trajectory_csv(file, &trajectories)?;
    #[derive(Serialize)]
    struct RsOutput {
        config_hash: String,
        #[serde(flatten)]
        report: crate::rs_lab::DualityReport,
    }
    std::fs::write(
        &args.report,
        serde_json::to_string_pretty(&RsOutput {
            config_hash: config_hash(args)?,
            report,
        })?,
    )?;
    Ok(())
}

/// Execute one parsed command.
pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Uqf(args) => cmd_uqf(args),
        Command::Bounds(args) => cmd_bounds(args),
        Command::Gibbs(args) => cmd_gibbs(args),
        Command::Experiment(args) => cmd_experiment(args),
        Command::RsLab(args) => cmd_rs_lab(args),
    }
}

/// Entry point for the binary: parse, run, map errors to JSON on stderr.
pub fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(&cli) {
        #[derive(Serialize)]
        struct ErrorJson<'a> {
            error: ErrorBody<'a>,
        }
        #[derive(Serialize)]
        struct ErrorBody<'a> {
            kind: &'a str,
            message: String,
        }
        let body = ErrorJson {
            error: ErrorBody {
                kind: err.kind(),
                message: err.to_string(),
            },
        };
        eprintln!("{}", serde_json::to_string(&body).unwrap());
        std::process::exit(1);
    }
}
