//! End-to-end acceptance gate. Each test covers one numbered criterion and
//! prints a pass line with the measured quantity; tolerances are pinned and
//! must not be loosened without revisiting the claims they encode.

use std::time::Instant;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qpdiff::admm::{admm_solve, recover_duals};
use qpdiff::cli::{fd_reference_bundle, run_bench, BenchArgs};
use qpdiff::core::{generate_exp1_problem, GradientBundle, QpProblem, QpSolution, SolverConfig};
use qpdiff::diff::{
    backward, build_fixed_point_matrix, build_kkt_backward_matrix, fixed_point_residual,
    projection_mask, BackwardMethod,
};
use qpdiff::ipo::{
    self, generate_exp2_dataset, ols_fit, sharpe_loss, LinearModel, TrainConfig, TrainObjective,
};
use qpdiff::oracle::{reference_solve, strictly_complementary};

fn solve_at(problem: &QpProblem, eps: f64, trace: bool) -> QpSolution {
    let config = SolverConfig {
        record_trace: trace,
        ..SolverConfig::with_tolerance(eps)
    };
    admm_solve(problem, &config, None).unwrap()
}

/// Relative error with a 1e-7 absolute floor.
fn rel_err(a: f64, b: f64) -> f64 {
    let diff = (a - b).abs();
    if diff <= 1e-7 {
        0.0
    } else {
        diff / a.abs().max(b.abs())
    }
}

fn max_bundle_err(a: &GradientBundle, b: &GradientBundle) -> f64 {
    let slices = [
        (a.dq.as_slice(), b.dq.as_slice()),
        (a.dp.as_slice(), b.dp.as_slice()),
        (a.da.as_slice(), b.da.as_slice()),
        (a.db.as_slice(), b.db.as_slice()),
        (a.dl.as_slice(), b.dl.as_slice()),
        (a.du.as_slice(), b.du.as_slice()),
    ];
    slices
        .iter()
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(x, y)| rel_err(*x, *y))
        .fold(0.0, f64::max)
}

/// Per-part relative error: infinity-norm of the difference over the
/// infinity-norm of the larger part, with the 1e-7 absolute floor. Entrywise
/// ratios are ill-posed where an implicit engine yields an exact zero and
/// the unrolled engine carries an O(eps) truncation tail.
fn max_part_err(a: &GradientBundle, b: &GradientBundle) -> f64 {
    let slices = [
        (a.dq.as_slice(), b.dq.as_slice()),
        (a.dp.as_slice(), b.dp.as_slice()),
        (a.da.as_slice(), b.da.as_slice()),
        (a.db.as_slice(), b.db.as_slice()),
        (a.dl.as_slice(), b.dl.as_slice()),
        (a.du.as_slice(), b.du.as_slice()),
    ];
    let mut worst = 0.0_f64;
    for (x, y) in slices {
        let diff = x
            .iter()
            .zip(y)
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        if diff <= 1e-7 {
            continue;
        }
        let scale = x
            .iter()
            .chain(y)
            .map(|v| v.abs())
            .fold(0.0, f64::max);
        worst = worst.max(diff / scale);
    }
    worst
}

fn seeded_grad(d_z: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xacce97);
    DVector::from_fn(d_z, |_, _| rng.gen_range(-1.0..1.0))
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs[xs.len() / 2]
}

/// Criterion 1: forward solutions match the independent active-set oracle.
#[test]
fn c01_forward_correctness() {
    let start = Instant::now();
    let mut worst_z = 0.0_f64;
    let mut worst_gap = 0.0_f64;
    for d_z in [5usize, 20, 50] {
        for trial in 0..100u64 {
            let problem = generate_exp1_problem(d_z, 100_000 + trial * 7 + d_z as u64);
            let sol = solve_at(&problem, 1e-6, false);
            assert!(sol.converged, "d_z={d_z} trial={trial} did not converge");
            let oracle = reference_solve(&problem).unwrap();
            let z_err = (&sol.z_star - &oracle.z_star).amax();
            let gap = (problem.objective(&sol.z_star) - problem.objective(&oracle.z_star)).abs();
            let gap_tol = 1e-6 * (1.0 + problem.objective(&oracle.z_star).abs());
            assert!(z_err <= 10.0 * 1e-6, "d_z={d_z} trial={trial}: {z_err:.3e}");
            assert!(gap <= gap_tol, "d_z={d_z} trial={trial}: gap {gap:.3e}");
            worst_z = worst_z.max(z_err);
            worst_gap = worst_gap.max(gap);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 60.0, "suite took {elapsed:.1}s");
    println!(
        "criterion 1 forward correctness: pass (max |z - z_ref| {worst_z:.3e}, max gap {worst_gap:.3e}, {elapsed:.1}s)"
    );
}

/// Criterion 2: KKT residuals at convergence.
#[test]
fn c02_kkt_conditions() {
    let mut worst = 0.0_f64;
    for d_z in [5usize, 20, 50] {
        for trial in 0..100u64 {
            let problem = generate_exp1_problem(d_z, 100_000 + trial * 7 + d_z as u64);
            let sol = solve_at(&problem, 1e-6, false);
            assert!(sol.converged);
            let duals = recover_duals(&sol.mu_star, sol.rho);
            let z = &sol.z_star;
            let stationarity = (&problem.q * z
                + &problem.p
                + problem.a.transpose() * &sol.eta_star
                + &duals.lambda_plus
                - &duals.lambda_minus)
                .amax();
            let feasibility = (&problem.a * z - &problem.b).amax();
            let mut slack = 0.0_f64;
            for j in 0..d_z {
                slack = slack
                    .max((duals.lambda_minus[j] * (z[j] - problem.l[j])).abs())
                    .max((duals.lambda_plus[j] * (problem.u[j] - z[j])).abs());
            }
            let residual = stationarity.max(feasibility).max(slack);
            assert!(residual <= 1e-5, "d_z={d_z} trial={trial}: {residual:.3e}");
            worst = worst.max(residual);
        }
    }
    println!("criterion 2 KKT conditions: pass (max residual {worst:.3e})");
}

/// Criterion 3: the converged iterate is a fixed point of the modified map.
#[test]
fn c03_fixed_point_identity() {
    let mut worst = 0.0_f64;
    for trial in 0..50u64 {
        let problem = generate_exp1_problem(10, 300_000 + trial);
        let sol = solve_at(&problem, 1e-10, false);
        assert!(sol.converged);
        let r = fixed_point_residual(&problem, sol.rho, &sol.v_star, &sol.eta_star)
            .unwrap()
            .amax();
        assert!(r <= 1e-8, "trial {trial}: residual {r:.3e}");
        worst = worst.max(r);
    }
    println!("criterion 3 fixed-point identity: pass (max residual {worst:.3e})");
}

/// Criterion 4: fixed-point backward matches finite differences through the
/// oracle on strict-complementarity instances.
#[test]
fn c04_gradient_correctness() {
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut seed = 0u64;
    let mut worst = 0.0_f64;
    while checked < 50 {
        let problem = generate_exp1_problem(10, 400_000 + seed);
        seed += 1;
        let sol = solve_at(&problem, 1e-10, false);
        if !sol.converged || !strictly_complementary(&problem, &sol.v_star, 1e-3) {
            skipped += 1;
            continue;
        }
        let grad = seeded_grad(10, seed);
        let (bundle, _) = backward(&problem, &sol, &grad, BackwardMethod::FixedPoint).unwrap();
        let want = fd_reference_bundle(&problem, &grad).unwrap();
        let err = max_bundle_err(&bundle, &want);
        assert!(err <= 1e-4, "seed {seed}: {err:.3e}");
        worst = worst.max(err);
        checked += 1;
    }
    let skip_rate = skipped as f64 / (checked + skipped) as f64;
    assert!(skip_rate < 0.2, "skip rate {skip_rate:.2}");
    println!(
        "criterion 4 gradient correctness: pass (max rel err {worst:.3e}, {skipped} skipped of {})",
        checked + skipped
    );
}

/// Criterion 5: the three backward engines agree pairwise.
#[test]
fn c05_engine_equivalence() {
    let methods = [
        BackwardMethod::FixedPoint,
        BackwardMethod::KktImplicit,
        BackwardMethod::Unrolled,
    ];
    let mut checked = 0usize;
    let mut seed = 0u64;
    let mut worst = 0.0_f64;
    while checked < 50 {
        let problem = generate_exp1_problem(10, 500_000 + seed);
        seed += 1;
        let sol = solve_at(&problem, 1e-8, true);
        if !sol.converged || !strictly_complementary(&problem, &sol.v_star, 1e-3) {
            continue;
        }
        let grad = seeded_grad(10, seed);
        let bundles: Vec<GradientBundle> = methods
            .iter()
            .map(|&m| backward(&problem, &sol, &grad, m).unwrap().0)
            .collect();
        for i in 0..3 {
            for j in (i + 1)..3 {
                let err = max_part_err(&bundles[i], &bundles[j]);
                assert!(
                    err <= 1e-4,
                    "seed {seed} {} vs {}: {err:.3e}",
                    methods[i].label(),
                    methods[j].label()
                );
                worst = worst.max(err);
            }
        }
        checked += 1;
    }
    println!("criterion 5 engine equivalence: pass (max pairwise err {worst:.3e})");
}

/// Criterion 6: backward system sizes d_z+d_eq vs 3 d_z+d_eq.
#[test]
fn c06_system_sizes() {
    let problem = generate_exp1_problem(10, 600_000);
    let sol = solve_at(&problem, 1e-8, false);
    let mask = projection_mask(&sol.v_star, &problem.l, &problem.u);
    let fp = build_fixed_point_matrix(&problem, sol.rho, &mask);
    let kkt = build_kkt_backward_matrix(&problem, &sol);
    assert_eq!(fp.nrows(), 10 + 1);
    assert_eq!(kkt.nrows(), 3 * 10 + 1);
    println!(
        "criterion 6 system sizes: pass (fixed-point {}, KKT {})",
        fp.nrows(),
        kkt.nrows()
    );
}

/// Criterion 7: fixed-point backward is at least twice as fast as
/// KKT-implicit at d_z = 250.
#[test]
fn c07_backward_timing_ordering() {
    let rows = run_bench(&BenchArgs {
        dims: vec![250],
        eps: vec![1e-3],
        batch: 32,
        trials: 10,
        methods: vec!["fp".into(), "kkt".into()],
        out: None,
        seed: 7,
        jobs: None,
    })
    .unwrap();
    let times = |m: &str| {
        rows.iter()
            .filter(|r| r.method == m)
            .map(|r| r.backward_seconds)
            .collect::<Vec<_>>()
    };
    let fp = median(times("fp"));
    let kkt = median(times("kkt"));
    assert!(
        fp <= 0.5 * kkt,
        "median fp {fp:.4}s vs kkt {kkt:.4}s at d_z=250"
    );
    println!("criterion 7 backward timing: pass (median fp {fp:.4}s, kkt {kkt:.4}s)");
}

/// Criterion 8: fixed-point backward cost is invariant to forward iteration
/// count; unrolled cost grows with it.
#[test]
fn c08_unrolled_invariance() {
    let bench = |eps: f64| {
        run_bench(&BenchArgs {
            dims: vec![100],
            eps: vec![eps],
            batch: 32,
            trials: 11,
            methods: vec!["fp".into(), "unroll".into()],
            out: None,
            seed: 8,
            jobs: None,
        })
        .unwrap()
    };
    let loose = bench(1e-1);
    let tight = bench(1e-5);
    let med = |rows: &[qpdiff::cli::BenchRow], m: &str| {
        median(
            rows.iter()
                .filter(|r| r.method == m)
                .map(|r| r.backward_seconds)
                .collect(),
        )
    };
    let fp_loose = med(&loose, "fp");
    let fp_tight = med(&tight, "fp");
    let un_loose = med(&loose, "unroll");
    let un_tight = med(&tight, "unroll");
    let iters = |rows: &[qpdiff::cli::BenchRow]| rows[0].iterations;
    assert!(iters(&tight) > iters(&loose));
    let variation = (fp_loose - fp_tight).abs() / fp_loose.max(fp_tight);
    assert!(
        variation < 0.2,
        "fixed-point backward varied {variation:.2} between eps 1e-1 ({fp_loose:.4}s) and 1e-5 ({fp_tight:.4}s)"
    );
    assert!(
        un_tight > un_loose,
        "unrolled backward did not grow with iterations: {un_loose:.4}s -> {un_tight:.4}s"
    );
    println!(
        "criterion 8 unrolled invariance: pass (fp {fp_loose:.4}/{fp_tight:.4}s, unroll {un_loose:.4}/{un_tight:.4}s)"
    );
}

/// Criterion 9: desk-scale learn-p training descends and beats the OLS
/// plug-in policy.
#[test]
fn c09_learn_p_descent_beats_ols() {
    let start = Instant::now();
    let dataset = generate_exp2_dataset(50, 5, 640, 0.10, 9);
    let model = LinearModel::seeded(5, 50, 90);
    let config = TrainConfig {
        epochs: 30,
        batch_size: 32,
        seed: 9,
        ..TrainConfig::default()
    };
    let history = ipo::train(&dataset, &model, TrainObjective::QpDecision, &config).unwrap();
    let initial = history.epoch_loss[0];
    let last = *history.epoch_loss.last().unwrap();
    assert!(last < initial, "no descent: {initial:.4e} -> {last:.4e}");

    let indices: Vec<usize> = (0..dataset.n_samples()).collect();
    let ols = ols_fit(&dataset).unwrap();
    let ols_loss =
        ipo::policy_loss_oracle(&dataset, &ols.theta, TrainObjective::QpDecision, &indices)
            .unwrap();
    let trained_loss = ipo::policy_loss_oracle(
        &dataset,
        &history.final_theta,
        TrainObjective::QpDecision,
        &indices,
    )
    .unwrap();
    assert!(
        trained_loss < ols_loss,
        "trained {trained_loss:.4e} vs OLS {ols_loss:.4e}"
    );
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed <= 300.0, "took {elapsed:.0}s");
    println!(
        "criterion 9 learn-p descent: pass ({initial:.4e} -> {last:.4e}, trained {trained_loss:.4e} < OLS {ols_loss:.4e}, {elapsed:.0}s)"
    );
}

/// Criterion 10: trained max-Sharpe and min-variance policies do not lose to
/// the OLS plug-in on synthetic factor data at d_z = 30.
#[test]
fn c10_sharpe_and_variance_analogues() {
    let dataset = generate_exp2_dataset(30, 5, 192, 0.10, 10);
    let indices: Vec<usize> = (0..dataset.n_samples()).collect();
    let ols = ols_fit(&dataset).unwrap();
    let config = TrainConfig {
        epochs: 10,
        batch_size: 32,
        learning_rate: 0.01,
        seed: 10,
        ..TrainConfig::default()
    };

    // Training refines the OLS plug-in parameters in both recasts.
    let sharpe_history =
        ipo::train(&dataset, &ols, TrainObjective::MaxSharpe, &config).unwrap();
    let sharpe = |theta| {
        -ipo::policy_loss_oracle(&dataset, theta, TrainObjective::MaxSharpe, &indices).unwrap()
    };
    let trained_sharpe = sharpe(&sharpe_history.final_theta);
    let ols_sharpe = sharpe(&ols.theta);
    assert!(
        trained_sharpe >= ols_sharpe,
        "trained Sharpe {trained_sharpe:.4} < OLS {ols_sharpe:.4}"
    );

    let var_history =
        ipo::train(&dataset, &ols, TrainObjective::MinVariance, &config).unwrap();
    let variance = |theta| {
        ipo::policy_loss_oracle(&dataset, theta, TrainObjective::MinVariance, &indices).unwrap()
    };
    let trained_var = variance(&var_history.final_theta);
    let ols_var = variance(&ols.theta);
    assert!(
        trained_var <= ols_var,
        "trained variance {trained_var:.4e} > OLS {ols_var:.4e}"
    );
    println!(
        "criterion 10 portfolio analogues: pass (Sharpe {ols_sharpe:.4} -> {trained_sharpe:.4}, variance {ols_var:.4e} -> {trained_var:.4e})"
    );
}

/// Criterion 11: the Sharpe loss is homogeneous of degree zero.
#[test]
fn c11_sharpe_scale_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let q = qpdiff::ipo::toeplitz_q(8);
    for _ in 0..20 {
        let z = DVector::from_fn(8, |_, _| rng.gen_range(0.1..1.0));
        let a = DVector::from_fn(8, |_, _| rng.gen_range(-0.2..0.3));
        let base = sharpe_loss(&z, &a, &q).unwrap();
        for c in [0.5, 2.0, 10.0] {
            let scaled = sharpe_loss(&(&z * c), &a, &q).unwrap();
            assert!((scaled - base).abs() <= 1e-12, "c={c}: {scaled} vs {base}");
        }
    }
    println!("criterion 11 Sharpe scale invariance: pass");
}

/// Criterion 12: recovered box multipliers are nonnegative with exact
/// complementarity on every converged solve.
#[test]
fn c12_dual_recovery() {
    for d_z in [5usize, 20, 50] {
        for trial in 0..100u64 {
            let problem = generate_exp1_problem(d_z, 100_000 + trial * 7 + d_z as u64);
            let sol = solve_at(&problem, 1e-6, false);
            if !sol.converged {
                continue;
            }
            let duals = recover_duals(&sol.mu_star, sol.rho);
            for j in 0..d_z {
                assert!(duals.lambda_minus[j] >= 0.0);
                assert!(duals.lambda_plus[j] >= 0.0);
                assert_eq!(duals.lambda_minus[j] * duals.lambda_plus[j], 0.0);
            }
        }
    }
    println!("criterion 12 dual recovery: pass");
}
