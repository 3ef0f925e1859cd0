//! Fit one crossed random-effects dataset under all three variational
//! families and compare what they report.
//!
//! The data come in through the same long-CSV + JSON-schema path the CLI
//! uses, so this doubles as an ingestion example.

use std::io::Write;

use pfvi::cavi::{fit, FitOptions};
use pfvi::model::{load_long_csv, validate_model, DataSchema, FactorSchema, Likelihood, PriorSpec};
use pfvi::sim::{gen_crossed_mcar, simulate_responses, SimOptions};
use pfvi::surrogate::Partition;

fn main() -> pfvi::Result<()> {
    // Simulate a 24×24 crossed design with 60% of cells missing, then
    // round-trip it through CSV + schema.
    let design = gen_crossed_mcar(24, 24, 0.6, 7)?;
    let (data, truth) = simulate_responses(&design, &SimOptions::default(), 11)?;
    let dir = tempfile::tempdir()?;
    let csv_path = dir.path().join("data.csv");
    {
        let mut f = std::fs::File::create(&csv_path)?;
        writeln!(f, "y,row,col")?;
        for i in 0..data.n {
            writeln!(
                f,
                "{},r{:03},c{:03}",
                data.y[i], data.memberships[0][i], data.memberships[1][i]
            )?;
        }
    }
    let schema = DataSchema {
        response: "y".into(),
        trials: None,
        fixed: vec![],
        factors: vec![
            FactorSchema { name: "row".into(), slopes: vec![] },
            FactorSchema { name: "col".into(), slopes: vec![] },
        ],
        intercept: true,
    };
    let data = load_long_csv(&csv_path, &schema, Likelihood::Gaussian)?;
    let prior = PriorSpec::scalar_inverse_gamma(2, 1.0, 0.5);
    let report = validate_model(&data, &prior, Likelihood::Gaussian);
    println!(
        "loaded n = {}, parameters = {}, validation warnings = {}",
        data.n,
        data.total_dim(),
        report.warnings.len()
    );
    println!(
        "ground truth: intercept {:.3}, variances {:?}",
        truth.intercept,
        truth.variances.iter().map(|v| (v * 100.0).round() / 100.0).collect::<Vec<_>>()
    );

    for part in [
        Partition::fully_factorized(3),
        Partition::collapse_fixed(3),
        Partition::unfactorized(3),
    ] {
        let res = fit(&data, Likelihood::Gaussian, &prior, &part, &FitOptions::default())?;
        let var = res.state.theta_marginal_variances()?;
        let mean_var_row = var.rows(1, data.factors[0].levels).sum() / data.factors[0].levels as f64;
        println!(
            "{:>8}: converged={} iterations={:3} elbo={:.4} mean row-level variance={:.4}",
            part.label(),
            res.converged,
            res.iterations,
            res.state.elbo_trace.last().unwrap(),
            mean_var_row
        );
    }
    println!("(the fully factorized family reports visibly smaller level variances)");
    Ok(())
}
