//! Integrated predict-and-optimize training.
//!
//! A linear model maps features to QP data (cost vector, expected returns,
//! or covariance loadings); the realized decision loss is backpropagated
//! through the QP layer and into the model parameters by SGD.

use std::str::FromStr;
use std::time::Instant;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::admm::{factorize_kkt, solve_with_factorization, KktFactorization};
use crate::core::{QpProblem, SolverConfig};
use crate::diff::{backward, BackwardMethod};
use crate::error::{QpError, Result};

/// Linear prediction model: row i of `theta'` maps features to the i-th
/// output coordinate, i.e. predictions are `theta' w`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub theta: DMatrix<f64>, // d_w x d_z
}

impl LinearModel {
    /// Small random initialization, N(0, 0.01) entries.
    pub fn seeded(d_w: usize, d_z: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let theta = DMatrix::from_fn(d_w, d_z, |_, _| {
            0.1 * rng.sample::<f64, _>(StandardNormal)
        });
        LinearModel { theta }
    }
}

/// Synthetic predict-and-optimize dataset. Rows of `w` are feature vectors,
/// rows of `p` the corresponding realized cost/return vectors. `w_cov` and
/// `f_diag` parameterize the factor covariance model used by the
/// minimum-variance objective.
#[derive(Debug, Clone, PartialEq)]
pub struct IpoDataset {
    pub w: DMatrix<f64>,      // m x d_w
    pub p: DMatrix<f64>,      // m x d_z
    pub q_true: DMatrix<f64>, // d_z x d_z
    pub theta0: DMatrix<f64>, // d_w x d_z
    pub snr: f64,
    pub tau: f64,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
    pub w_cov: DMatrix<f64>,  // d_w x d_w
    pub f_diag: DVector<f64>, // d_z
}

impl IpoDataset {
    pub fn n_samples(&self) -> usize {
        self.w.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_assets(&self) -> usize {
        self.p.ncols()
    }
}

/// Toeplitz ground-truth covariance with entry (j,k) = 0.5^|j-k|.
pub fn toeplitz_q(d_z: usize) -> DMatrix<f64> {
    DMatrix::from_fn(d_z, d_z, |j, k| {
        0.5_f64.powi((j as i64 - k as i64).unsigned_abs() as i32)
    })
}

fn entry_variance(m: &DMatrix<f64>) -> f64 {
    let n = (m.nrows() * m.ncols()) as f64;
    let mean = m.sum() / n;
    m.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}

/// Generates a synthetic dataset: features w ~ N(0, I), noise e ~ N(0, Q)
/// with Q Toeplitz (0.5^|j-k|), returns p = theta0'w + tau*e with tau
/// calibrated so the sample variance ratio Var(signal)/Var(noise) equals
/// `snr`. Bounds l ~ U[-1,0], u ~ U[0,1] per coordinate. Draw order: theta0,
/// w, e, l, u.
pub fn generate_exp2_dataset(d_z: usize, d_w: usize, m: usize, snr: f64, seed: u64) -> IpoDataset {
    assert!(d_z >= 1 && d_w >= 1 && m >= 1);
    assert!(snr > 0.0 && snr <= 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q_true = toeplitz_q(d_z);
    let chol = Cholesky::new(q_true.clone()).expect("Toeplitz covariance is positive definite");

    let theta0 = DMatrix::from_fn(d_w, d_z, |_, _| rng.sample::<f64, _>(StandardNormal));
    let w = DMatrix::from_fn(m, d_w, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut noise = DMatrix::zeros(m, d_z);
    for i in 0..m {
        let g = DVector::from_fn(d_z, |_, _| rng.sample::<f64, _>(StandardNormal));
        noise.row_mut(i).tr_copy_from(&(chol.l() * g));
    }
    let signal = &w * &theta0;
    let tau = (entry_variance(&signal) / snr).sqrt() / entry_variance(&noise).sqrt();
    let p = &signal + tau * &noise;

    let l = DVector::from_fn(d_z, |_, _| rng.gen_range(-1.0..0.0));
    let u = DVector::from_fn(d_z, |_, _| rng.gen_range(0.0..1.0));

    IpoDataset {
        w,
        p,
        q_true,
        theta0,
        snr,
        tau,
        l,
        u,
        w_cov: DMatrix::identity(d_w, d_w),
        f_diag: DVector::from_element(d_z, 0.1),
    }
}

/// Realized QP decision loss z'p + 1/2 z'Qz.
pub fn qp_decision_loss(z: &DVector<f64>, p_true: &DVector<f64>, q_true: &DMatrix<f64>) -> f64 {
    z.dot(p_true) + 0.5 * (q_true * z).dot(z)
}

/// Gradient of [`qp_decision_loss`] in z.
pub fn qp_decision_seed(
    z: &DVector<f64>,
    p_true: &DVector<f64>,
    q_true: &DMatrix<f64>,
) -> DVector<f64> {
    p_true + q_true * z
}

/// Negative realized Sharpe ratio, -a'z / sqrt(z'Qz). Homogeneous of degree
/// zero in z.
pub fn sharpe_loss(z: &DVector<f64>, a_true: &DVector<f64>, q_true: &DMatrix<f64>) -> Result<f64> {
    let risk = (q_true * z).dot(z);
    if risk <= 1e-14 {
        return Err(QpError::DegenerateRisk);
    }
    Ok(-a_true.dot(z) / risk.sqrt())
}

/// Gradient of [`sharpe_loss`] in z by the quotient rule.
pub fn sharpe_seed(
    z: &DVector<f64>,
    a_true: &DVector<f64>,
    q_true: &DMatrix<f64>,
) -> Result<DVector<f64>> {
    let qz = q_true * z;
    let risk = qz.dot(z);
    if risk <= 1e-14 {
        return Err(QpError::DegenerateRisk);
    }
    let s = risk.sqrt();
    Ok(-a_true / s + qz * (a_true.dot(z) / (s * risk)))
}

/// Realized portfolio variance z'Qz.
pub fn min_var_loss(z: &DVector<f64>, q_true: &DMatrix<f64>) -> f64 {
    (q_true * z).dot(z)
}

/// Gradient of [`min_var_loss`] in z.
pub fn min_var_seed(z: &DVector<f64>, q_true: &DMatrix<f64>) -> DVector<f64> {
    2.0 * (q_true * z)
}

/// Convex recast of the maximum-Sharpe problem: minimize 1/2 z'Qz subject to
/// a_hat'z = 1, z >= 0. Final weights come from [`normalize_weights`].
pub fn max_sharpe_problem(a_hat: &DVector<f64>, q: &DMatrix<f64>) -> Result<QpProblem> {
    if a_hat.iter().all(|&a| a <= 0.0) {
        return Err(QpError::InfeasibleRecast);
    }
    let d_z = a_hat.len();
    QpProblem::new(
        q.clone(),
        DVector::zeros(d_z),
        DMatrix::from_fn(1, d_z, |_, j| a_hat[j]),
        DVector::from_element(1, 1.0),
        DVector::zeros(d_z),
        DVector::from_element(d_z, f64::INFINITY),
    )
}

/// Rescales weights to sum to one.
pub fn normalize_weights(z: &DVector<f64>) -> Result<DVector<f64>> {
    let s = z.sum();
    if s.abs() <= 1e-12 {
        return Err(QpError::ZeroSum);
    }
    Ok(z / s)
}

/// Factor covariance model Q_hat = theta' W_cov theta + diag(f_diag).
pub fn build_covariance(
    theta: &DMatrix<f64>,
    w_cov: &DMatrix<f64>,
    f_diag: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    if f_diag.iter().any(|&f| f <= 0.0) {
        return Err(QpError::NonPositiveResidualVariance);
    }
    let mut q = theta.transpose() * w_cov * theta;
    for j in 0..f_diag.len() {
        q[(j, j)] += f_diag[j];
    }
    Ok(q)
}

/// Columnwise ordinary least squares: theta = (W'W)^-1 W'P.
pub fn ols_fit(dataset: &IpoDataset) -> Result<LinearModel> {
    let d_w = dataset.n_features();
    if dataset.n_samples() <= d_w {
        return Err(QpError::RankDeficientFeatures);
    }
    let gram = dataset.w.transpose() * &dataset.w;
    let lu = gram.lu();
    let upper = lu.u();
    let max_pivot = (0..d_w).map(|i| upper[(i, i)].abs()).fold(0.0, f64::max);
    let min_pivot = (0..d_w)
        .map(|i| upper[(i, i)].abs())
        .fold(f64::INFINITY, f64::min);
    if min_pivot <= 1e-10 * max_pivot.max(1.0) {
        return Err(QpError::RankDeficientFeatures);
    }
    let rhs = dataset.w.transpose() * &dataset.p;
    let theta = lu.solve(&rhs).ok_or(QpError::RankDeficientFeatures)?;
    Ok(LinearModel { theta })
}

/// Training objective; selects both the forward QP construction and the
/// realized loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainObjective {
    /// Learn the cost vector: forward p = -theta'w, loss z'p + 1/2 z'Qz.
    QpDecision,
    /// Learn expected returns for the max-Sharpe recast.
    MaxSharpe,
    /// Learn covariance loadings; loss is realized variance.
    MinVariance,
}

impl TrainObjective {
    pub fn label(&self) -> &'static str {
        match self {
            TrainObjective::QpDecision => "learn-p",
            TrainObjective::MaxSharpe => "max-sharpe",
            TrainObjective::MinVariance => "min-var",
        }
    }
}

impl FromStr for TrainObjective {
    type Err = QpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learn-p" => Ok(TrainObjective::QpDecision),
            "max-sharpe" => Ok(TrainObjective::MaxSharpe),
            "min-var" => Ok(TrainObjective::MinVariance),
            other => Err(QpError::Parse(format!("unknown objective {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub backward_method: BackwardMethod,
    pub train_eps: f64,
    pub eval_eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            backward_method: BackwardMethod::FixedPoint,
            train_eps: 1e-4,
            eval_eps: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainHistory {
    pub epoch_loss: Vec<f64>,
    pub forward_seconds: Vec<f64>,
    pub backward_seconds: Vec<f64>,
    pub final_theta: DMatrix<f64>,
    pub skipped_instances: usize,
}

struct InstanceResult {
    loss: f64,
    dtheta: DMatrix<f64>,
    forward_seconds: f64,
    backward_seconds: f64,
}

/// Mean realized loss and mean parameter gradient over `indices`.
pub struct BatchResult {
    pub mean_loss: f64,
    pub grad: DMatrix<f64>,
    pub count: usize,
    pub skipped: usize,
    pub forward_seconds: f64,
    pub backward_seconds: f64,
}

fn solver_config(eps: f64, method: BackwardMethod) -> SolverConfig {
    SolverConfig {
        record_trace: method == BackwardMethod::Unrolled,
        ..SolverConfig::with_tolerance(eps)
    }
}

fn instance_step(
    dataset: &IpoDataset,
    theta: &DMatrix<f64>,
    objective: TrainObjective,
    i: usize,
    config: &SolverConfig,
    method: BackwardMethod,
    shared: Option<(&QpProblem, &KktFactorization)>,
) -> Result<Option<InstanceResult>> {
    let w_i = dataset.w.row(i).transpose();
    let p_true = dataset.p.row(i).transpose();

    let owned_problem;
    let problem = match (objective, shared) {
        (TrainObjective::MaxSharpe, _) => {
            let a_hat = theta.transpose() * &w_i;
            match max_sharpe_problem(&a_hat, &dataset.q_true) {
                Ok(p) => {
                    owned_problem = p;
                    &owned_problem
                }
                Err(QpError::InfeasibleRecast) => {
                    eprintln!("skipping instance {i}: max-Sharpe recast infeasible");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            }
        }
        (TrainObjective::QpDecision, Some((template, _))) => {
            owned_problem = QpProblem {
                p: -(theta.transpose() * &w_i),
                ..template.clone()
            };
            &owned_problem
        }
        (TrainObjective::MinVariance, Some((template, _))) => template,
        (_, None) => unreachable!("shared template is built for non-Sharpe objectives"),
    };

    let start = Instant::now();
    let solution = match shared {
        Some((_, f)) => solve_with_factorization(problem, config, f, None)?,
        None => {
            let f = factorize_kkt(problem, config.rho)?;
            solve_with_factorization(problem, config, &f, None)?
        }
    };
    let forward_seconds = start.elapsed().as_secs_f64();

    let z = &solution.z_star;
    let (loss, seed) = match objective {
        TrainObjective::QpDecision => (
            qp_decision_loss(z, &p_true, &dataset.q_true),
            qp_decision_seed(z, &p_true, &dataset.q_true),
        ),
        TrainObjective::MaxSharpe => (
            sharpe_loss(z, &p_true, &dataset.q_true)?,
            sharpe_seed(z, &p_true, &dataset.q_true)?,
        ),
        TrainObjective::MinVariance => (
            min_var_loss(z, &dataset.q_true),
            min_var_seed(z, &dataset.q_true),
        ),
    };

    let (bundle, bwd) = match backward(problem, &solution, &seed, method) {
        Ok(out) => out,
        Err(QpError::SingularBackwardSystem) => {
            eprintln!("skipping instance {i}: singular backward system");
            return Ok(None);
        }
        Err(e) => return Err(e),
    };

    // Chain the bundle through the prediction map into theta.
    let dtheta = match objective {
        // forward p = -theta'w, so d theta = -w dp'
        TrainObjective::QpDecision => -(&w_i * bundle.dp.transpose()),
        // equality row is a_hat' = (theta'w)'
        TrainObjective::MaxSharpe => &w_i * bundle.da.row(0),
        // Q_hat = theta' W_cov theta + diag(F)
        TrainObjective::MinVariance => {
            &dataset.w_cov * theta * (&bundle.dq + bundle.dq.transpose())
        }
    };

    Ok(Some(InstanceResult {
        loss,
        dtheta,
        forward_seconds,
        backward_seconds: bwd.as_secs_f64(),
    }))
}

/// Forward problem template shared by every instance of a batch (None for
/// max-Sharpe, whose equality row changes per instance).
fn batch_template(
    dataset: &IpoDataset,
    theta: &DMatrix<f64>,
    objective: TrainObjective,
    rho: f64,
) -> Result<Option<(QpProblem, KktFactorization)>> {
    let d_z = dataset.n_assets();
    let ones = DMatrix::from_element(1, d_z, 1.0);
    let b = DVector::from_element(1, 1.0);
    let q = match objective {
        TrainObjective::QpDecision => dataset.q_true.clone(),
        TrainObjective::MinVariance => build_covariance(theta, &dataset.w_cov, &dataset.f_diag)?,
        TrainObjective::MaxSharpe => return Ok(None),
    };
    let problem = QpProblem::new(
        q,
        DVector::zeros(d_z),
        ones,
        b,
        dataset.l.clone(),
        dataset.u.clone(),
    )?;
    let factorization = factorize_kkt(&problem, rho)?;
    Ok(Some((problem, factorization)))
}

/// Mean loss and mean theta-gradient over the given instances. Instances run
/// concurrently; accumulation is a fixed-order sequential sum over instance
/// index for reproducibility.
pub fn batch_gradient(
    dataset: &IpoDataset,
    theta: &DMatrix<f64>,
    objective: TrainObjective,
    indices: &[usize],
    config: &TrainConfig,
) -> Result<BatchResult> {
    let solver = solver_config(config.train_eps, config.backward_method);
    let template = batch_template(dataset, theta, objective, solver.rho)?;
    let shared = template.as_ref().map(|(p, f)| (p, f));

    let results: Vec<Result<Option<InstanceResult>>> = indices
        .par_iter()
        .map(|&i| instance_step(dataset, theta, objective, i, &solver, config.backward_method, shared))
        .collect();

    let mut grad = DMatrix::zeros(theta.nrows(), theta.ncols());
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    let mut fwd = 0.0;
    let mut bwd = 0.0;
    for r in results {
        match r? {
            Some(out) => {
                grad += out.dtheta;
                loss_sum += out.loss;
                fwd += out.forward_seconds;
                bwd += out.backward_seconds;
                count += 1;
            }
            None => skipped += 1,
        }
    }
    if count > 0 {
        grad /= count as f64;
        loss_sum /= count as f64;
    }
    Ok(BatchResult {
        mean_loss: loss_sum,
        grad,
        count,
        skipped,
        forward_seconds: fwd,
        backward_seconds: bwd,
    })
}

/// SGD over seeded mini-batches. Per-epoch loss is the mean realized loss
/// over all instances, evaluated at the parameters current when each batch
/// was visited.
pub fn train(
    dataset: &IpoDataset,
    model: &LinearModel,
    objective: TrainObjective,
    config: &TrainConfig,
) -> Result<TrainHistory> {
    assert!(config.epochs >= 1 && config.batch_size >= 1);
    assert!(config.learning_rate >= 0.0);
    assert!(config.train_eps > 0.0 && config.eval_eps <= config.train_eps);
    let m = dataset.n_samples();
    let mut theta = model.theta.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = TrainHistory {
        epoch_loss: Vec::with_capacity(config.epochs),
        forward_seconds: Vec::with_capacity(config.epochs),
        backward_seconds: Vec::with_capacity(config.epochs),
        final_theta: theta.clone(),
        skipped_instances: 0,
    };

    let mut order: Vec<usize> = (0..m).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        let mut fwd = 0.0;
        let mut bwd = 0.0;
        for batch in order.chunks(config.batch_size) {
            let out = batch_gradient(dataset, &theta, objective, batch, config)?;
            if out.count > 0 {
                theta -= config.learning_rate * &out.grad;
                loss_sum += out.mean_loss * out.count as f64;
                count += out.count;
            }
            history.skipped_instances += out.skipped;
            fwd += out.forward_seconds;
            bwd += out.backward_seconds;
        }
        history
            .epoch_loss
            .push(if count > 0 { loss_sum / count as f64 } else { f64::NAN });
        history.forward_seconds.push(fwd);
        history.backward_seconds.push(bwd);
    }
    history.final_theta = theta;
    Ok(history)
}

/// Mean realized loss of the policy induced by `theta`, computed through the
/// reference solver (used by baselines and gradient checks, not training).
pub fn policy_loss_oracle(
    dataset: &IpoDataset,
    theta: &DMatrix<f64>,
    objective: TrainObjective,
    indices: &[usize],
) -> Result<f64> {
    let d_z = dataset.n_assets();
    let ones = DMatrix::from_element(1, d_z, 1.0);
    let b = DVector::from_element(1, 1.0);
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in indices {
        let w_i = dataset.w.row(i).transpose();
        let p_true = dataset.p.row(i).transpose();
        let problem = match objective {
            TrainObjective::QpDecision => QpProblem::new(
                dataset.q_true.clone(),
                -(theta.transpose() * &w_i),
                ones.clone(),
                b.clone(),
                dataset.l.clone(),
                dataset.u.clone(),
            )?,
            TrainObjective::MaxSharpe => {
                match max_sharpe_problem(&(theta.transpose() * &w_i), &dataset.q_true) {
                    Ok(p) => p,
                    Err(QpError::InfeasibleRecast) => continue,
                    Err(e) => return Err(e),
                }
            }
            TrainObjective::MinVariance => QpProblem::new(
                build_covariance(theta, &dataset.w_cov, &dataset.f_diag)?,
                DVector::zeros(d_z),
                ones.clone(),
                b.clone(),
                dataset.l.clone(),
                dataset.u.clone(),
            )?,
        };
        let z = crate::oracle::reference_solve(&problem)?.z_star;
        sum += match objective {
            TrainObjective::QpDecision => qp_decision_loss(&z, &p_true, &dataset.q_true),
            TrainObjective::MaxSharpe => sharpe_loss(&z, &p_true, &dataset.q_true)?,
            TrainObjective::MinVariance => min_var_loss(&z, &dataset.q_true),
        };
        count += 1;
    }
    if count == 0 {
        return Err(QpError::InfeasibleRecast);
    }
    Ok(sum / count as f64)
}
