//! The exact small-instance machinery behind the tests: dense moments of
//! the collapsed Gaussian target, the observation-space projector, and the
//! implicit per-block covariance probed without ever forming it.

use nalgebra::DVector;
use pfvi::cavi::{continue_fit, init_state, FitOptions};
use pfvi::model::{Likelihood, PriorSpec};
use pfvi::sim::{gen_uniform_cells, simulate_responses, SimOptions};
use pfvi::surrogate::{build_surrogate, exact_target_moments, CollapsedSystem, Partition};

fn main() -> pfvi::Result<()> {
    let design = gen_uniform_cells(5, 6, 40, 3)?;
    let (data, _) = simulate_responses(&design, &SimOptions::default(), 5)?;
    let prior = PriorSpec::scalar_inverse_gamma(2, 1.0, 0.5);
    let part = Partition::collapse_fixed(3);

    // Fit a few sweeps at the initial q(φ) so the factors are populated.
    let state = init_state(&data, Likelihood::Gaussian, &prior, &part)?;
    let phi = state.phi.clone();
    let opts = FitOptions { tol: -1.0, max_iter: 50, fix_phi: true, ..Default::default() };
    let res = continue_fit(state, &data, &prior, &opts)?;
    let st = res.state;

    // Dense oracle moments of the collapsed target.
    let s = build_surrogate(&data, Likelihood::Gaussian, &phi)?;
    let tm = exact_target_moments(&s, &part)?;
    println!(
        "collapsed blocks {:?}; uncollapsed marginal dim {}",
        tm.c_blocks,
        tm.u_mean.len()
    );
    let mu1 = st.block_mean(1)?;
    let err = (mu1 - tm.u_mean.rows(0, mu1.len())).amax();
    println!("fitted mean vs dense oracle, first factor block: max err {err:.2e}");

    // Projector applied matrix-free.
    let sys = CollapsedSystem::build(&s, &part)?;
    let v = DVector::from_fn(data.n, |i, _| (i as f64 * 0.37).sin());
    let proj = sys.apply_projector(&s, &v);
    let twice = sys.apply_projector(&s, &proj);
    println!(
        "projector: ‖M v‖∞ = {:.4}, idempotency defect {:.2e}",
        proj.amax(),
        (&proj - &twice).amax()
    );

    // Implicit per-block covariance: probe one column and the trace.
    let dim = s.block_dim(1);
    let mut e0 = DVector::zeros(dim);
    e0[0] = 1.0;
    let col = st.apply_lambda(1, &e0)?;
    let blocks = st.extract_lambda_blocks(1)?;
    let trace: f64 = blocks.iter().map(|b| b.trace()).sum();
    println!(
        "implicit covariance of factor 1: Λe₀[0] = {:.5}, trace from diagonal blocks = {:.4}, log|Λ| = {:.4}",
        col[0],
        trace,
        st.logdet_lambda(1)?
    );
    Ok(())
}
