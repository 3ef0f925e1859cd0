//! Acceptance gates: every numbered criterion below runs at its stated
//! tolerance and prints one PASS/FAIL line.
//!
//! Run with `cargo test -p pfvi --test acceptance -- --nocapture` to see
//! the lines for passing gates too.

use std::sync::{Mutex, MutexGuard};
use std::time::Instant;

/// Gates run one at a time: several assert wall-clock budgets, which
/// parallel test threads would contaminate. Poisoning is expected when a
/// red gate panics while holding the lock.
static SUITE: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    SUITE.lock().unwrap_or_else(|e| e.into_inner())
}

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use pfvi::bounds::{
    bounds_report, ff_bound, pf_uqf_balanced, raw_counts, rg_bound, scalar_penalties,
    weighted_counts,
};
use pfvi::cavi::{fit, FitOptions};
use pfvi::cli::resolve_partition;
use pfvi::gibbs::{gibbs_gaussian, GibbsOptions};
use pfvi::model::{FactorSpec, Likelihood, MixedModelData, PriorSpec};
use pfvi::rng::{derive_seed, rng_from_seed};
use pfvi::rs_lab::{normalized_lab, GaussianTarget, StartPoint};
use pfvi::sim::{
    gen_biregular, gen_crossed_mcar, gen_crossed_mcar_fixed_n, gen_uniform_cells,
    median_sweep_time, simulate_responses, SimOptions,
};
use pfvi::surrogate::{build_surrogate, GaussianSurrogate, IgParams, IwParams, Partition, QPhi};
use pfvi::uqf::{tv_accuracy, uqf_analytic, uqf_split_sample};

fn verdict(id: u32, ok: bool, detail: &str, started: Instant) {
    let line = format!(
        "ACCEPTANCE {id}: {} ({detail}) [{:.2}s]",
        if ok { "PASS" } else { "FAIL" },
        started.elapsed().as_secs_f64()
    );
    println!("{line}");
    assert!(ok, "{line}");
}

fn budget(id: u32, started: Instant, seconds: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    assert!(
        elapsed < seconds,
        "ACCEPTANCE {id}: runtime {elapsed:.2}s exceeds budget {seconds}s"
    );
}

/// Random K = 2 Gaussian instance (G_k ≤ 8, n ≤ 60) with a fixed q(φ);
/// odd seeds get a random-slope second factor.
fn small_instance(seed: u64) -> (MixedModelData, QPhi) {
    let mut rng = rng_from_seed(derive_seed(9000, &[seed]));
    let g1 = rng.gen_range(3..=8);
    let g2 = rng.gen_range(3..=8);
    let n = rng.gen_range(30..=60);
    let d2 = if seed % 2 == 1 { 2 } else { 1 };
    let memberships = vec![
        (0..n).map(|_| rng.gen_range(0..g1)).collect::<Vec<_>>(),
        (0..n).map(|_| rng.gen_range(0..g2)).collect::<Vec<_>>(),
    ];
    let x = DMatrix::from_fn(n, 2, |_, j| if j == 0 { 1.0 } else { rng.gen_range(-1.0..1.0) });
    let y = DVector::from_fn(n, |_, _| rng.gen_range(-2.0..2.0));
    let slope2 = DMatrix::from_fn(n, d2, |_, j| {
        if j == 0 {
            1.0
        } else {
            rng.gen_range(-1.0..1.0)
        }
    });
    let data = MixedModelData::new(
        y,
        vec![1; n],
        x,
        vec![
            FactorSpec::intercept_only("a", g1),
            FactorSpec {
                name: "b".into(),
                levels: g2,
                effect_dim: d2,
                slope_columns: if d2 == 1 {
                    vec!["1".into()]
                } else {
                    vec!["1".into(), "w".into()]
                },
            },
        ],
        memberships,
        vec![DMatrix::from_element(n, 1, 1.0), slope2],
        Likelihood::Gaussian,
    )
    .unwrap();
    let mut scale2 = DMatrix::identity(d2, d2) * rng.gen_range(0.8..3.0);
    if d2 == 2 {
        scale2[(0, 1)] = 0.2;
        scale2[(1, 0)] = 0.2;
    }
    let q_phi = QPhi {
        iw: vec![
            IwParams {
                df: rng.gen_range(2.0..5.0),
                scale: DMatrix::from_element(1, 1, rng.gen_range(0.8..3.0)),
            },
            IwParams {
                df: rng.gen_range((d2 as f64) + 1.0..6.0),
                scale: scale2,
            },
        ],
        resid: Some(IgParams {
            a: rng.gen_range(1.5..4.0),
            b: rng.gen_range(1.5..4.0),
        }),
        omega: None,
    };
    (data, q_phi)
}

/// Fit at a caller-provided fixed q(φ) with a forced sweep count.
fn matching_prior(data: &MixedModelData) -> PriorSpec {
    PriorSpec {
        iw_df: data.factors.iter().map(|f| f.effect_dim as f64 + 1.0).collect(),
        iw_scale: data
            .factors
            .iter()
            .map(|f| DMatrix::identity(f.effect_dim, f.effect_dim))
            .collect(),
    }
}

fn fit_fixed_phi(
    data: &MixedModelData,
    q_phi: &QPhi,
    part: &Partition,
    sweeps: usize,
) -> pfvi::cavi::FitResult {
    let prior = matching_prior(data);
    let mut state = pfvi::cavi::init_state(data, Likelihood::Gaussian, &prior, part).unwrap();
    state.phi = q_phi.clone();
    let opts = FitOptions {
        tol: -1.0,
        max_iter: sweeps,
        fix_phi: true,
        ..Default::default()
    };
    pfvi::cavi::continue_fit(state, data, &prior, &opts).unwrap()
}

fn all_partitions(num_blocks: usize) -> Vec<Partition> {
    vec![
        Partition::fully_factorized(num_blocks),
        Partition::collapse_fixed(num_blocks),
        Partition::unfactorized(num_blocks),
    ]
}

#[test]
fn criterion_01_fixed_phi_exactness() {
    let _guard = exclusive();
    let started = Instant::now();
    let mut worst_mean = 0.0f64;
    let mut worst_cov = 0.0f64;
    for seed in 0..20u64 {
        let (data, q_phi) = small_instance(seed);
        let s = build_surrogate(&data, Likelihood::Gaussian, &q_phi).unwrap();
        let (mean, cov) = s.dense_joint_moments().unwrap();
        for part in all_partitions(3) {
            let res = fit_fixed_phi(&data, &q_phi, &part, 4000);
            let got = res.state.theta_mean().unwrap();
            worst_mean = worst_mean.max((&got - &mean).amax());
            if part.uncollapsed.is_empty() {
                let qhat = res.state.export_q_precision().unwrap();
                let cov_q = qhat.try_inverse().unwrap();
                worst_cov = worst_cov.max((&cov_q - &cov).amax());
            }
        }
    }
    let ok = worst_mean < 1e-8 && worst_cov < 1e-8;
    budget(1, started, 10.0);
    verdict(
        1,
        ok,
        &format!("worst mean err {worst_mean:.2e}, worst UF cov err {worst_cov:.2e}"),
        started,
    );
}

#[test]
fn criterion_02_balanced_pf_uqf_exactness() {
    let _guard = exclusive();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for trial in 0..20u64 {
        let mut rng = rng_from_seed(derive_seed(9100, &[trial]));
        let d = rng.gen_range(4..=8usize);
        let g = [8usize, 16, 32, 64][(trial % 4) as usize];
        let n = d * g;
        let design = gen_biregular(n, d, d, derive_seed(9101, &[trial])).unwrap();
        let (data, _) = simulate_responses(
            &design,
            &SimOptions::default(),
            derive_seed(9102, &[trial]),
        )
        .unwrap();
        let t = [rng.gen_range(0.5..2.5), rng.gen_range(0.5..2.5)];
        let q_phi = QPhi {
            iw: t
                .iter()
                .map(|&tk| IwParams {
                    df: 2.0,
                    scale: DMatrix::from_element(1, 1, 2.0 / tk),
                })
                .collect(),
            resid: Some(IgParams { a: 2.0, b: 2.0 }),
            omega: None,
        };
        let part = Partition::collapse_fixed(3);
        let res = fit_fixed_phi(&data, &q_phi, &part, 400);
        let s = res.state.surrogate();
        let counts = weighted_counts(s, &data).unwrap();
        let tk = scalar_penalties(s).unwrap();
        let exact = pf_uqf_balanced(&counts, &tk, data.n).unwrap();
        let (_, cov_pi) = s.dense_joint_moments().unwrap();
        let qhat = res.state.export_q_precision().unwrap();
        let fitted = uqf_analytic(&cov_pi, &qhat).unwrap();
        worst = worst.max((fitted - exact.uqf_exact).abs());
    }
    let ok = worst < 1e-8;
    budget(2, started, 30.0);
    verdict(2, ok, &format!("worst |fitted − closed form| = {worst:.2e}"), started);
}

/// Random-intercept surrogate with given T_k and unit D weights.
fn intercept_surrogate(data: &MixedModelData, t: &[f64]) -> GaussianSurrogate {
    let q_phi = QPhi {
        iw: t
            .iter()
            .map(|&tk| IwParams {
                df: 2.0,
                scale: DMatrix::from_element(1, 1, 2.0 / tk),
            })
            .collect(),
        resid: Some(IgParams { a: 2.0, b: 2.0 }),
        omega: None,
    };
    build_surrogate(data, Likelihood::Gaussian, &q_phi).unwrap()
}

#[test]
fn criterion_03_ff_bound_dominates() {
    let _guard = exclusive();
    let started = Instant::now();
    let mut worst_slack = f64::NEG_INFINITY;
    for trial in 0..50u64 {
        let mut rng = rng_from_seed(derive_seed(9200, &[trial]));
        let design = if trial % 2 == 0 {
            let d = rng.gen_range(3..=6usize);
            let g = rng.gen_range(8..=32usize);
            gen_biregular(d * g, d, d, derive_seed(9201, &[trial])).unwrap()
        } else {
            let g1 = rng.gen_range(6..=16usize);
            let g2 = rng.gen_range(6..=16usize);
            gen_crossed_mcar(g1, g2, rng.gen_range(0.3..0.7), derive_seed(9202, &[trial]))
                .unwrap()
        };
        let (data, _) =
            simulate_responses(&design, &SimOptions::default(), derive_seed(9203, &[trial]))
                .unwrap();
        let t = [rng.gen_range(0.5..3.0), rng.gen_range(0.5..3.0)];
        let s = intercept_surrogate(&data, &t);
        let counts = weighted_counts(&s, &data).unwrap();
        let tk = scalar_penalties(&s).unwrap();
        let bound = ff_bound(&counts, &tk, data.n).unwrap();

        let q = s.dense_joint_precision().unwrap();
        let (_, cov_pi) = s.dense_joint_moments().unwrap();
        let p = q.nrows();
        let mut q_ff = DMatrix::zeros(p, p);
        let mut off = 0;
        for b in 0..3 {
            let dim = s.block_dim(b);
            q_ff.view_mut((off, off), (dim, dim))
                .copy_from(&q.view((off, off), (dim, dim)).into_owned());
            off += dim;
        }
        let uqf = uqf_analytic(&cov_pi, &q_ff).unwrap();
        worst_slack = worst_slack.max(uqf - bound);
    }
    let ok = worst_slack <= 1e-10;
    budget(3, started, 30.0);
    verdict(
        3,
        ok,
        &format!("max (UQF − bound) = {worst_slack:.2e}"),
        started,
    );
}

#[test]
fn criterion_04_random_design_trend() {
    let _guard = exclusive();
    let started = Instant::now();
    let g_values = [16usize, 32, 64, 128];
    let replicates = 4;
    let d = 8usize;
    let prior = PriorSpec::scalar_inverse_gamma(2, 1.0, 0.5);
    let opts = FitOptions {
        tol: 1e-6,
        max_iter: 500,
        ..Default::default()
    };
    let mut pf_means = Vec::new();
    let mut pf_ses = Vec::new();
    let mut ff_means = Vec::new();
    for (gi, &g) in g_values.iter().enumerate() {
        let mut pf_vals = Vec::new();
        let mut ff_vals = Vec::new();
        for r in 0..replicates {
            let design =
                gen_biregular(d * g, d, d, derive_seed(9300, &[gi as u64, r])).unwrap();
            let (data, _) = simulate_responses(
                &design,
                &SimOptions::default(),
                derive_seed(9301, &[gi as u64, r]),
            )
            .unwrap();
            for (fam, part) in [
                ("pf", Partition::collapse_fixed(3)),
                ("ff", Partition::fully_factorized(3)),
            ] {
                let res = fit(&data, Likelihood::Gaussian, &prior, &part, &opts).unwrap();
                let (_, cov_pi) = res.state.surrogate().dense_joint_moments().unwrap();
                let qhat = res.state.export_q_precision().unwrap();
                let uqf = uqf_analytic(&cov_pi, &qhat).unwrap();
                if fam == "pf" {
                    pf_vals.push(uqf);
                } else {
                    ff_vals.push(uqf);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let m_pf = mean(&pf_vals);
        let var_pf = pf_vals.iter().map(|v| (v - m_pf).powi(2)).sum::<f64>()
            / (pf_vals.len() as f64 - 1.0);
        pf_means.push(m_pf);
        pf_ses.push((var_pf / pf_vals.len() as f64).sqrt());
        ff_means.push(mean(&ff_vals));
    }
    let bound = rg_bound(d * 128, 128, 128);
    let pf_at_largest_ok = pf_means[3] >= bound - 0.05;
    let mut pf_monotone_ok = true;
    for i in 1..pf_means.len() {
        let slack = 3.0 * (pf_ses[i] * pf_ses[i] + pf_ses[i - 1] * pf_ses[i - 1]).sqrt();
        if pf_means[i] < pf_means[i - 1] - slack {
            pf_monotone_ok = false;
        }
    }
    let ff_ratio = ff_means[0] / ff_means[3];
    // In the fixed-degree regime both factorizations are asymptotically
    // scale-free: the fully factorized UQF's level-count and
    // observation-count effects cancel (measured ratio ≈ 1, not ≥ 2), and
    // the collapsed family's UQF drifts mildly DOWN toward its limit as
    // the co-occurrence spectral gap closes with G. The lower-bound check
    // above is the part that holds; the two trend sub-checks are asserted
    // as stated rather than weakened, and fail.
    let ff_halves_ok = ff_ratio >= 2.0;
    let ok = pf_at_largest_ok && pf_monotone_ok && ff_halves_ok;
    budget(4, started, 120.0);
    verdict(
        4,
        ok,
        &format!(
            "PF at G=128 ≥ bound−0.05: {pf_at_largest_ok} (means {pf_means:.3?}, bound {bound:.3}); PF non-decreasing within noise: {pf_monotone_ok}; FF halves: {ff_halves_ok} (means {ff_means:.3?}, G16/G128 ratio {ff_ratio:.2}, need ≥ 2)"
        ),
        started,
    );
}

#[test]
fn criterion_05_duality_bracket() {
    let _guard = exclusive();
    let started = Instant::now();
    let runs = 10_000usize;
    let sweeps = 20usize;
    let mut checked_points = 0usize;
    let mut ok = true;
    let mut detail = String::new();
    for trial in 0..20u64 {
        let mut rng = rng_from_seed(derive_seed(9400, &[trial]));
        let num_blocks = rng.gen_range(2..=4usize);
        let mut sizes = Vec::new();
        let mut left = 16usize;
        for b in 0..num_blocks {
            let remaining = num_blocks - b - 1;
            let max_here = (left - remaining).clamp(1, 6);
            let s = rng.gen_range(1..=max_here);
            sizes.push(s);
            left -= s;
        }
        let target = GaussianTarget::random(&sizes, &mut rng);
        let part = if trial % 4 == 3 && num_blocks > 2 {
            Partition::new(vec![0], num_blocks).unwrap()
        } else {
            Partition::fully_factorized(num_blocks)
        };
        let lab = normalized_lab(&target, &part).unwrap();
        let u = lab.num_u_blocks() as f64;
        if u < 2.0 {
            continue;
        }
        let lambda = lab.uqf;
        let ratio = 1.0 - lambda / u;

        let mut sums = vec![0.0; sweeps + 1];
        let mut sq_sums = vec![0.0; sweeps + 1];
        for r in 0..runs {
            let traj = lab.random_scan(
                sweeps,
                derive_seed(9401, &[trial, r as u64]),
                &StartPoint::MinEigvec,
            );
            for (t, &g) in traj.v_gaps.iter().enumerate() {
                sums[t] += g;
                sq_sums[t] += g * g;
            }
        }
        let gap0 = sums[0] / runs as f64;
        for t in 1..=sweeps {
            let mean = sums[t] / runs as f64;
            let var = (sq_sums[t] / runs as f64 - mean * mean).max(0.0);
            let se = (var / runs as f64).sqrt();
            let hi = ratio.powi((u as i32) * t as i32) * gap0;
            let lo = ratio.powi(2 * (u as i32) * t as i32) * gap0;
            if hi < 1e-250 {
                break;
            }
            checked_points += 1;
            if mean > hi + 3.0 * se || mean < lo - 3.0 * se {
                ok = false;
                detail = format!(
                    "trial {trial} sweep {t}: mean {mean:.3e} ∉ [{lo:.3e}, {hi:.3e}] ± 3·{se:.3e}"
                );
            }
        }
    }
    budget(5, started, 120.0);
    if detail.is_empty() {
        detail = format!("{checked_points} bracket points within 3σ");
    }
    verdict(5, ok, &detail, started);
}

#[test]
fn criterion_06_woodbury_and_logdet_identities() {
    let _guard = exclusive();
    let started = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let (data, q_phi) = small_instance(seed);
        for part in [
            Partition::collapse_fixed(3),
            Partition::new(vec![0, 1], 3).unwrap(),
        ] {
            let res = fit_fixed_phi(&data, &q_phi, &part, 3);
            let st = &res.state;
            let s = st.surrogate();
            for &block in &part.uncollapsed {
                // Dense Λ_k = (P_k + W_kᵀM_C W_k)⁻¹.
                let w_k = s.dense_w(block);
                let n = s.n();
                let mut m_wk = DMatrix::zeros(n, w_k.ncols());
                for j in 0..w_k.ncols() {
                    let col = DVector::from_column_slice(w_k.column(j).as_slice());
                    m_wk.set_column(j, &st.collapsed().apply_projector(s, &col));
                }
                let prec = s.dense_penalty(block) + w_k.transpose() * m_wk;
                let lam = prec.clone().try_inverse().unwrap();
                let scale = lam.amax();

                let dim = lam.nrows();
                for j in 0..dim {
                    let mut e = DVector::zeros(dim);
                    e[j] = 1.0;
                    let col = st.apply_lambda(block, &e).unwrap();
                    worst = worst.max((&col - &lam.column(j).into_owned()).amax() / scale);
                }
                let blocks = st.extract_lambda_blocks(block).unwrap();
                let d = blocks[0].nrows();
                for (g, b) in blocks.iter().enumerate() {
                    let dense = lam.view((g * d, g * d), (d, d)).into_owned();
                    worst = worst.max((b - &dense).amax() / scale);
                }
                let dense_logdet: f64 = prec
                    .cholesky()
                    .unwrap()
                    .l()
                    .diagonal()
                    .iter()
                    .map(|v| -2.0 * v.ln())
                    .sum();
                let identity = st.logdet_lambda(block).unwrap();
                worst = worst.max((identity - dense_logdet).abs() / dense_logdet.abs().max(1.0));
            }
        }
    }
    let ok = worst < 1e-8;
    budget(6, started, 10.0);
    verdict(6, ok, &format!("worst relative error {worst:.2e}"), started);
}

#[test]
fn criterion_07_elbo_monotonicity() {
    let _guard = exclusive();
    let started = Instant::now();
    let mut fits = 0usize;
    let mut worst_drop = 0.0f64;
    for lik in [Likelihood::Gaussian, Likelihood::Binomial] {
        for seed in 0..3u64 {
            let design = gen_uniform_cells(6, 7, 120, derive_seed(9500, &[seed])).unwrap();
            let (data, _) = simulate_responses(
                &design,
                &SimOptions {
                    likelihood: lik,
                    ..Default::default()
                },
                derive_seed(9501, &[seed]),
            )
            .unwrap();
            let prior = PriorSpec::scalar_inverse_gamma(2, 1.0, 0.5);
            for part in all_partitions(3) {
                let opts = FitOptions {
                    tol: -1.0,
                    max_iter: 200,
                    ..Default::default()
                };
                let res = fit(&data, lik, &prior, &part, &opts).unwrap();
                fits += 1;
                for w in res.state.elbo_trace.windows(2) {
                    worst_drop = worst_drop.max(w[0] - w[1]);
                }
            }
        }
    }
    let ok = worst_drop <= 1e-9;
    verdict(
        7,
        ok,
        &format!("{fits} fits × 200 sweeps, worst ELBO drop {worst_drop:.2e}"),
        started,
    );
}

#[test]
fn criterion_08_gibbs_calibration() {
    let _guard = exclusive();
    let started = Instant::now();
    let replicates = 20usize;
    let prior = PriorSpec::scalar_inverse_gamma(2, 1.0, 0.5);
    let mut pf_beats_ff = 0usize;
    let mut mean_pf = 0.0;
    let mut mean_ff = 0.0;
    let mut mean_uf = 0.0;
    let mut tv_pf_total = 0.0;
    let mut tv_ff_total = 0.0;
    for r in 0..replicates as u64 {
        let design = gen_uniform_cells(8, 8, 100, derive_seed(9600, &[r])).unwrap();
        let (data, _) = simulate_responses(
            &design,
            &SimOptions::default(),
            derive_seed(9601, &[r]),
        )
        .unwrap();
        let draws = gibbs_gaussian(
            &data,
            &prior,
            &GibbsOptions {
                iters: 20_000,
                burn_in: 1_000,
                thin: 1,
                seed: derive_seed(9602, &[r]),
                ..Default::default()
            },
        )
        .unwrap();

        let fit_opts = FitOptions::default();
        let mut uqfs = Vec::new();
        let mut tv_means = Vec::new();
        for part in all_partitions(3) {
            let res = fit(&data, Likelihood::Gaussian, &prior, &part, &fit_opts).unwrap();
            let qhat = res.state.export_q_precision().unwrap();
            let est = uqf_split_sample(&draws.theta, &qhat, 5, 50, derive_seed(9603, &[r]))
                .unwrap();
            uqfs.push(est.value);

            // Mean TV accuracy over θ coordinates: Gibbs vs q samples.
            let mut rng = rng_from_seed(derive_seed(9604, &[r]));
            let s = 4_000;
            let p = data.total_dim();
            let mut q_cols = vec![Vec::with_capacity(s); p];
            for _ in 0..s {
                let draw = res.state.sample_theta(&mut rng).unwrap();
                for j in 0..p {
                    q_cols[j].push(draw[j]);
                }
            }
            let mut acc = 0.0;
            for (j, q_col) in q_cols.iter().enumerate() {
                let pi_col: Vec<f64> = draws.theta.column(j).iter().copied().collect();
                acc += tv_accuracy(&pi_col, q_col).unwrap();
            }
            tv_means.push(acc / p as f64);
        }
        let (ff, pf, uf) = (uqfs[0], uqfs[1], uqfs[2]);
        if pf > ff {
            pf_beats_ff += 1;
        }
        mean_ff += ff / replicates as f64;
        mean_pf += pf / replicates as f64;
        mean_uf += uf / replicates as f64;
        tv_ff_total += tv_means[0] / replicates as f64;
        tv_pf_total += tv_means[1] / replicates as f64;
    }
    let ok = pf_beats_ff >= 18 && mean_uf >= mean_pf - 0.05 && tv_pf_total > tv_ff_total;
    budget(8, started, 300.0);
    verdict(
        8,
        ok,
        &format!(
            "PF>FF on {pf_beats_ff}/20; mean UQF ff/pf/uf = {mean_ff:.3}/{mean_pf:.3}/{mean_uf:.3}; mean TV pf {tv_pf_total:.3} vs ff {tv_ff_total:.3}"
        ),
        started,
    );
}

#[test]
fn criterion_09_split_sample_calibration() {
    let _guard = exclusive();
    let started = Instant::now();
    let mut rng = rng_from_seed(9700);
    let q = pfvi::linalg::random_spd(10, 0.4, 2.5, &mut rng);
    let cov_pi = q.clone().try_inverse().unwrap();
    let mut q_mf = DMatrix::zeros(10, 10);
    for (off, len) in [(0usize, 3usize), (3, 3), (6, 4)] {
        q_mf.view_mut((off, off), (len, len))
            .copy_from(&q.view((off, off), (len, len)).into_owned());
    }
    let analytic = uqf_analytic(&cov_pi, &q_mf).unwrap();
    let chol = cov_pi.clone().cholesky().unwrap();
    let s = 50_000usize;
    let mut mean_est = 0.0;
    let reps = 10;
    for rep in 0..reps as u64 {
        let mut sampler = rng_from_seed(derive_seed(9701, &[rep]));
        let mut samples = DMatrix::zeros(s, 10);
        for i in 0..s {
            let z = pfvi::linalg::standard_normal_vector(10, &mut sampler);
            let x = chol.l() * z;
            for j in 0..10 {
                samples[(i, j)] = x[j];
            }
        }
        let est = uqf_split_sample(&samples, &q_mf, 5, 50, derive_seed(9702, &[rep])).unwrap();
        mean_est += est.value / reps as f64;
    }
    let ok = (mean_est - analytic).abs() < 0.05;
    verdict(
        9,
        ok,
        &format!("estimator mean {mean_est:.4} vs analytic {analytic:.4}"),
        started,
    );
}

#[test]
fn criterion_10_cost_scaling() {
    let _guard = exclusive();
    let started = Instant::now();
    // Fixed observation count; the G-dependence of per-sweep cost is what
    // is under test. Collapsed-side work is cubic in its block dimension,
    // uncollapsed-side work linear.
    let n = 32_768usize;
    let prior = PriorSpec::scalar_inverse_gamma(2, 1.0, 0.5);
    let mut pf_times = Vec::new();
    let mut uf_times = Vec::new();
    for (gi, &g) in [256usize, 512].iter().enumerate() {
        let design = gen_crossed_mcar_fixed_n(g, g, n, derive_seed(9800, &[gi as u64])).unwrap();
        let (data, _) = simulate_responses(
            &design,
            &SimOptions::default(),
            derive_seed(9801, &[gi as u64]),
        )
        .unwrap();
        pf_times.push(
            median_sweep_time(
                &data,
                Likelihood::Gaussian,
                &prior,
                &Partition::collapse_fixed(3),
                3,
                5,
            )
            .unwrap(),
        );
        uf_times.push(
            median_sweep_time(
                &data,
                Likelihood::Gaussian,
                &prior,
                &Partition::unfactorized(3),
                3,
                5,
            )
            .unwrap(),
        );
    }
    let pf_ratio = pf_times[1] / pf_times[0];
    let uf_ratio = uf_times[1] / uf_times[0];
    let ok = pf_ratio <= 1.5 && uf_ratio >= 4.0;
    budget(10, started, 300.0);
    verdict(
        10,
        ok,
        &format!(
            "PF sweep {:.2e}s → {:.2e}s (×{pf_ratio:.2}, need ≤ 1.5); UF sweep {:.2e}s → {:.2e}s (×{uf_ratio:.2}, need ≥ 4)",
            pf_times[0], pf_times[1], uf_times[0], uf_times[1]
        ),
        started,
    );
}

#[test]
fn criterion_11_nested_design_diagnostics() {
    let _guard = exclusive();
    let started = Instant::now();
    // Factor A plus the interaction A×B, one observation per (A, B) cell:
    // the interaction is nested inside A, the bipartite level graph is
    // disconnected, λ_aux = 1.
    let g_a = 3usize;
    let g_b = 4usize;
    let mut cells = Vec::new();
    for a in 0..g_a {
        for b in 0..g_b {
            cells.push((a, a * g_b + b));
        }
    }
    let n = cells.len();
    let mut rng = rng_from_seed(9900);
    let pair_data = MixedModelData::new(
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        vec![1; n],
        DMatrix::from_element(n, 1, 1.0),
        vec![
            FactorSpec::intercept_only("a", g_a),
            FactorSpec::intercept_only("ab", g_a * g_b),
        ],
        vec![
            cells.iter().map(|c| c.0).collect(),
            cells.iter().map(|c| c.1).collect(),
        ],
        vec![DMatrix::from_element(n, 1, 1.0); 2],
        Likelihood::Gaussian,
    )
    .unwrap();
    let s = intercept_surrogate(&pair_data, &[1.0, 1.0]);
    let counts = weighted_counts(&s, &pair_data).unwrap();
    let report = bounds_report(&counts, &scalar_penalties(&s).unwrap(), n).unwrap();
    let lambda_ok = report
        .lambda_aux
        .map(|l| (l - 1.0).abs() < 1e-10)
        .unwrap_or(false);

    // pf:auto on the three-factor model {A, B, A×B} resolves C to the
    // fixed effects plus both main effects.
    let full_data = MixedModelData::new(
        DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)),
        vec![1; n],
        DMatrix::from_element(n, 1, 1.0),
        vec![
            FactorSpec::intercept_only("a", g_a),
            FactorSpec::intercept_only("b", g_b),
            FactorSpec::intercept_only("ab", g_a * g_b),
        ],
        vec![
            cells.iter().map(|c| c.0).collect(),
            cells.iter().map(|c| c.1 % g_b).collect(),
            cells.iter().map(|c| c.1).collect(),
        ],
        vec![DMatrix::from_element(n, 1, 1.0); 3],
        Likelihood::Gaussian,
    )
    .unwrap();
    let full_counts = raw_counts(&full_data).unwrap();
    let part = resolve_partition("pf:auto", &full_data, Some(&full_counts)).unwrap();
    let auto_ok = part.collapsed == vec![0, 1, 2] && part.uncollapsed == vec![3];

    let ok = lambda_ok && auto_ok;
    verdict(
        11,
        ok,
        &format!(
            "λ_aux = {:?}; pf:auto collapsed = {:?}",
            report.lambda_aux, part.collapsed
        ),
        started,
    );
}
