//! Command-line harness: benchmark sweeps, gradient checks and training
//! runs, each emitting CSV suitable for downstream plotting.

use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::admm::admm_solve;
use crate::core::{generate_exp1_problem, GradientBundle, SolverConfig};
use crate::diff::{backward, BackwardMethod};
use crate::error::{QpError, Result};
use crate::ipo::{self, LinearModel, TrainConfig, TrainObjective};
use crate::oracle::{fd_gradient, strictly_complementary, FdSpec, FdTarget};

#[derive(Parser, Debug)]
#[command(name = "qpdiff", about = "Differentiable QP layer harness", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Time forward solves and backward engines over a dimension sweep.
    Bench(BenchArgs),
    /// Check engine gradients against finite differences through the
    /// reference solver.
    Gradcheck(GradcheckArgs),
    /// Run a predict-and-optimize training loop on synthetic data.
    Train(TrainArgs),
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Problem dimensions to sweep.
    #[arg(long, value_delimiter = ',', required = true)]
    pub dims: Vec<usize>,
    /// Forward stopping tolerances.
    #[arg(long, value_delimiter = ',', default_values_t = [1e-3])]
    pub eps: Vec<f64>,
    /// Instances per trial.
    #[arg(long, default_value_t = 128)]
    pub batch: usize,
    /// Trials per (dimension, tolerance) cell.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,
    /// Backward engines to time (fp, kkt, unroll).
    #[arg(long, value_delimiter = ',', default_values_t = ["fp".to_string(), "kkt".to_string(), "unroll".to_string()])]
    pub methods: Vec<String>,
    /// CSV output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for in-batch parallelism (default: rayon's choice).
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 10)]
    pub dz: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    /// Backward engine (fp, kkt, unroll).
    #[arg(long, default_value = "fp")]
    pub method: BackwardMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Training objective (learn-p, max-sharpe, min-var).
    #[arg(long, default_value = "learn-p")]
    pub objective: TrainObjective,
    #[arg(long, default_value_t = 50)]
    pub dz: usize,
    #[arg(long, default_value_t = 5)]
    pub dw: usize,
    #[arg(long, default_value_t = 640)]
    pub m: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Backward engine (fp, kkt, unroll).
    #[arg(long, default_value = "fp")]
    pub method: BackwardMethod,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Per-epoch CSV output path (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One timed cell of a benchmark sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub d_z: usize,
    pub method: String,
    pub eps_tol: f64,
    pub trial: usize,
    pub forward_seconds: f64,
    pub backward_seconds: f64,
    pub iterations: usize,
    pub converged: bool,
}

pub const BENCH_HEADER: &str =
    "d_z,method,eps_tol,trial,forward_seconds,backward_seconds,iterations,converged";

pub fn bench_to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(BENCH_HEADER);
    out.push('\n');
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.d_z,
            r.method,
            r.eps_tol,
            r.trial,
            r.forward_seconds,
            r.backward_seconds,
            r.iterations,
            r.converged
        )
        .unwrap();
    }
    out
}

pub fn bench_from_csv(text: &str) -> Result<Vec<BenchRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == BENCH_HEADER => {}
        other => return Err(QpError::Parse(format!("bad CSV header {other:?}"))),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 8 {
                return Err(QpError::Parse(format!("bad CSV row {line:?}")));
            }
            let err = |e: &dyn std::fmt::Display| QpError::Parse(format!("{line:?}: {e}"));
            Ok(BenchRow {
                d_z: f[0].parse().map_err(|e| err(&e))?,
                method: f[1].to_string(),
                eps_tol: f[2].parse().map_err(|e| err(&e))?,
                trial: f[3].parse().map_err(|e| err(&e))?,
                forward_seconds: f[4].parse().map_err(|e| err(&e))?,
                backward_seconds: f[5].parse().map_err(|e| err(&e))?,
                iterations: f[6].parse().map_err(|e| err(&e))?,
                converged: f[7].parse().map_err(|e| err(&e))?,
            })
        })
        .collect()
}

fn grad_seed_vector(d_z: usize, seed: u64) -> DVector<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e3779b97f4a7c15);
    DVector::from_fn(d_z, |_, _| rng.gen_range(-1.0..1.0))
}

/// Runs the sweep and returns the raw rows. Timing covers the solve and
/// backward calls only; generation and I/O are excluded. Deterministic in
/// `seed` except for the timing columns.
pub fn run_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let methods: Vec<BackwardMethod> = args
        .methods
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    if methods.is_empty() || args.trials == 0 || args.batch == 0 {
        return Err(QpError::Parse("empty sweep".into()));
    }
    let record_trace = methods.contains(&BackwardMethod::Unrolled);
    let mut rows = Vec::new();
    for &d_z in &args.dims {
        for &eps in &args.eps {
            let config = SolverConfig {
                record_trace,
                ..SolverConfig::with_tolerance(eps)
            };
            for trial in 0..args.trials {
                let problems: Vec<_> = (0..args.batch)
                    .map(|i| {
                        generate_exp1_problem(
                            d_z,
                            args.seed
                                .wrapping_add(trial as u64)
                                .wrapping_mul(1000)
                                .wrapping_add(i as u64),
                        )
                    })
                    .collect();
                let grad = grad_seed_vector(d_z, args.seed.wrapping_add(trial as u64));

                let start = Instant::now();
                let solutions = problems
                    .par_iter()
                    .map(|p| admm_solve(p, &config, None))
                    .collect::<Result<Vec<_>>>()?;
                let forward_seconds = start.elapsed().as_secs_f64();
                let iterations: usize = solutions.iter().map(|s| s.iterations).sum();
                let converged = solutions.iter().all(|s| s.converged);

                for &method in &methods {
                    let start = Instant::now();
                    problems
                        .par_iter()
                        .zip(&solutions)
                        .map(|(p, s)| backward(p, s, &grad, method).map(|_| ()))
                        .collect::<Result<Vec<_>>>()?;
                    let backward_seconds = start.elapsed().as_secs_f64();
                    rows.push(BenchRow {
                        d_z,
                        method: method.label().to_string(),
                        eps_tol: eps,
                        trial,
                        forward_seconds,
                        backward_seconds,
                        iterations,
                        converged,
                    });
                }
            }
        }
    }
    Ok(rows)
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(path) => fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<i32> {
    let rows = run_bench(args)?;
    emit(&args.out, &bench_to_csv(&rows))?;
    Ok(0)
}

/// Relative error with a 1e-7 absolute floor: below the floor the absolute
/// difference is reported instead, so shrinking the tolerance stays
/// meaningful.
fn rel_err(got: f64, want: f64) -> f64 {
    let diff = (got - want).abs();
    if diff <= 1e-7 {
        diff
    } else {
        diff / got.abs().max(want.abs())
    }
}

fn bundle_rel_errors(got: &GradientBundle, want: &GradientBundle) -> [(&'static str, f64); 6] {
    let max = |g: &[f64], w: &[f64]| {
        g.iter()
            .zip(w)
            .map(|(a, b)| rel_err(*a, *b))
            .fold(0.0, f64::max)
    };
    [
        ("dQ", max(got.dq.as_slice(), want.dq.as_slice())),
        ("dp", max(got.dp.as_slice(), want.dp.as_slice())),
        ("dA", max(got.da.as_slice(), want.da.as_slice())),
        ("db", max(got.db.as_slice(), want.db.as_slice())),
        ("dl", max(got.dl.as_slice(), want.dl.as_slice())),
        ("du", max(got.du.as_slice(), want.du.as_slice())),
    ]
}

/// Full finite-difference bundle for the linear loss z -> grad'z through the
/// reference solver.
pub fn fd_reference_bundle(
    problem: &crate::core::QpProblem,
    grad: &DVector<f64>,
) -> Result<GradientBundle> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let loss = |z: &DVector<f64>| grad.dot(z);
    let mut out = GradientBundle::zeros(d_z, d_eq);
    for j in 0..d_z {
        for k in 0..d_z {
            out.dq[(j, k)] = fd_gradient(problem, loss, &FdSpec::new(FdTarget::Q(j, k)))?;
        }
        out.dp[j] = fd_gradient(problem, loss, &FdSpec::new(FdTarget::P(j)))?;
        out.dl[j] = fd_gradient(problem, loss, &FdSpec::new(FdTarget::L(j)))?;
        out.du[j] = fd_gradient(problem, loss, &FdSpec::new(FdTarget::U(j)))?;
        for i in 0..d_eq {
            out.da[(i, j)] = fd_gradient(problem, loss, &FdSpec::new(FdTarget::A(i, j)))?;
        }
    }
    for i in 0..d_eq {
        out.db[i] = fd_gradient(problem, loss, &FdSpec::new(FdTarget::B(i)))?;
    }
    Ok(out)
}

fn cmd_gradcheck(args: &GradcheckArgs) -> Result<i32> {
    let config = SolverConfig {
        record_trace: args.method == BackwardMethod::Unrolled,
        ..SolverConfig::with_tolerance(1e-10)
    };
    let mut checked = 0usize;
    let mut skipped = 0usize;
    let mut worst: [(&str, f64); 6] =
        [("dQ", 0.0), ("dp", 0.0), ("dA", 0.0), ("db", 0.0), ("dl", 0.0), ("du", 0.0)];
    let mut offset = 0u64;
    while checked < args.trials {
        let problem = generate_exp1_problem(args.dz, args.seed.wrapping_add(offset));
        offset += 1;
        let solution = admm_solve(&problem, &config, None)?;
        if !solution.converged || !strictly_complementary(&problem, &solution.v_star, 1e-3) {
            skipped += 1;
            if skipped > 10 * args.trials {
                return Err(QpError::Parse("too many degenerate instances".into()));
            }
            continue;
        }
        let grad = grad_seed_vector(args.dz, args.seed.wrapping_add(offset));
        let (bundle, _) = backward(&problem, &solution, &grad, args.method)?;
        let want = fd_reference_bundle(&problem, &grad)?;
        for (slot, (name, err)) in worst.iter_mut().zip(bundle_rel_errors(&bundle, &want)) {
            debug_assert_eq!(slot.0, name);
            slot.1 = slot.1.max(err);
        }
        checked += 1;
    }
    println!(
        "gradcheck method={} dz={} trials={checked} skipped={skipped}",
        args.method.label(),
        args.dz
    );
    let mut ok = true;
    for (name, err) in worst {
        let verdict = if err <= args.tol { "ok" } else { "FAIL" };
        ok &= err <= args.tol;
        println!("  {name}: max relative error {err:.3e} [{verdict}]");
    }
    Ok(if ok { 0 } else { 1 })
}

fn cmd_train(args: &TrainArgs) -> Result<i32> {
    let dataset = ipo::generate_exp2_dataset(args.dz, args.dw, args.m, 0.10, args.seed);
    let model = LinearModel::seeded(args.dw, args.dz, args.seed.wrapping_add(1));
    let config = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        learning_rate: args.lr,
        backward_method: args.method,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let history = ipo::train(&dataset, &model, args.objective, &config)?;

    let mut csv = String::from("epoch,mean_loss,fwd_seconds,bwd_seconds\n");
    for e in 0..history.epoch_loss.len() {
        writeln!(
            csv,
            "{},{},{},{}",
            e, history.epoch_loss[e], history.forward_seconds[e], history.backward_seconds[e]
        )
        .unwrap();
    }
    emit(&args.out, &csv)?;

    let initial = history.epoch_loss[0];
    let last = *history.epoch_loss.last().unwrap();
    eprintln!(
        "objective={} initial loss {initial:.6e}, final loss {last:.6e}, skipped {}",
        args.objective.label(),
        history.skipped_instances
    );
    // Strict descent beyond float-summation noise; lr = 0 must fail.
    let descended = last < initial - 1e-12 * initial.abs().max(1e-12);
    Ok(if descended { 0 } else { 1 })
}

/// Dispatches a parsed command line; returns the process exit code.
pub fn run(cli: &Cli) -> Result<i32> {
    let exec = || match &cli.command {
        Command::Bench(args) => cmd_bench(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Train(args) => cmd_train(args),
    };
    match &cli.command {
        Command::Bench(BenchArgs { jobs: Some(n), .. }) => rayon::ThreadPoolBuilder::new()
            .num_threads(*n)
            .build()
            .map_err(|e| QpError::Parse(e.to_string()))?
            .install(exec),
        _ => exec(),
    }
}
