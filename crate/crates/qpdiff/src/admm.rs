//! Forward-pass ADMM solver: factorization caching, simplified iterations,
//! stopping criteria and dual recovery.
//!
//! The consensus splitting x - z = 0 separates the equality-constrained
//! quadratic (x update, one cached KKT solve per iteration) from the box
//! indicator (z update, a closed-form projection).

use nalgebra::{DMatrix, DVector, Dyn};

use crate::core::{DualPair, QpProblem, QpSolution, SolveTrace, SolverConfig, TraceStep};
use crate::error::{QpError, Result};

/// Relative pivot threshold below which the KKT factorization is singular.
const PIVOT_TOL: f64 = 1e-12;

/// Builds M = [[Q + rho*I, A'], [A, 0]] of size (d_z + d_eq)^2.
pub fn build_kkt_matrix(problem: &QpProblem, rho: f64) -> DMatrix<f64> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let n = d_z + d_eq;
    let mut m = DMatrix::zeros(n, n);
    m.view_mut((0, 0), (d_z, d_z)).copy_from(&problem.q);
    for j in 0..d_z {
        m[(j, j)] += rho;
    }
    if d_eq > 0 {
        m.view_mut((0, d_z), (d_z, d_eq))
            .copy_from(&problem.a.transpose());
        m.view_mut((d_z, 0), (d_eq, d_z)).copy_from(&problem.a);
    }
    m
}

/// Cached LU factorization of the ADMM left-hand matrix. Immutable; reusable
/// across iterations, solves and training epochs as long as (Q, A, rho) are
/// unchanged.
pub struct KktFactorization {
    lu: nalgebra::linalg::LU<f64, Dyn, Dyn>,
    rho: f64,
    d_z: usize,
    d_eq: usize,
}

impl KktFactorization {
    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d_z, self.d_eq)
    }

    /// Solves M y = rhs. M is symmetric, so this doubles as the transposed solve.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.lu
            .solve(rhs)
            .expect("factorization was checked nonsingular")
    }
}

/// Factorizes the (d_z + d_eq) ADMM KKT matrix once; fails when A is
/// rank-deficient or Q + rho*I is not positive definite.
pub fn factorize_kkt(problem: &QpProblem, rho: f64) -> Result<KktFactorization> {
    assert!(rho > 0.0, "rho must be positive");
    let m = build_kkt_matrix(problem, rho);
    lu_checked(m).map(|lu| KktFactorization {
        lu,
        rho,
        d_z: problem.dim(),
        d_eq: problem.n_eq(),
    })
}

/// LU with an explicit relative pivot check; nalgebra's partial pivoting can
/// leave tiny nonzero pivots on numerically singular input.
pub(crate) fn lu_checked(m: DMatrix<f64>) -> Result<nalgebra::linalg::LU<f64, Dyn, Dyn>> {
    let n = m.nrows();
    let lu = m.lu();
    let upper = lu.u();
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot: f64 = 0.0;
    for i in 0..n {
        let d = upper[(i, i)].abs();
        min_pivot = min_pivot.min(d);
        max_pivot = max_pivot.max(d);
    }
    if n > 0 && (min_pivot <= PIVOT_TOL * max_pivot || !min_pivot.is_finite()) {
        return Err(QpError::SingularKkt);
    }
    Ok(lu)
}

/// Elementwise Euclidean projection onto [l, u].
pub fn project_box(x: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(x.len(), |j, _| x[j].max(l[j]).min(u[j]))
}

/// Full primal-dual state at one iteration.
#[derive(Debug, Clone)]
pub struct IterationState {
    pub x: DVector<f64>,
    pub z: DVector<f64>,
    pub mu: DVector<f64>,
    pub eta: DVector<f64>,
    pub k: usize,
}

impl IterationState {
    pub fn cold_start(d_z: usize, d_eq: usize) -> Self {
        IterationState {
            x: DVector::zeros(d_z),
            z: DVector::zeros(d_z),
            mu: DVector::zeros(d_z),
            eta: DVector::zeros(d_eq),
            k: 0,
        }
    }
}

/// One simplified ADMM iteration:
///   (x, eta) <- M^{-1} [-(p - rho (z - mu)); b]
///   z <- proj(x + mu)
///   mu <- mu + x - z
pub fn admm_step(
    state: &IterationState,
    factorization: &KktFactorization,
    problem: &QpProblem,
) -> IterationState {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let mut rhs = DVector::zeros(d_z + d_eq);
    let rho = factorization.rho();
    for j in 0..d_z {
        rhs[j] = -(problem.p[j] - rho * (state.z[j] - state.mu[j]));
    }
    for i in 0..d_eq {
        rhs[d_z + i] = problem.b[i];
    }
    let sol = factorization.solve(&rhs);
    let x = sol.rows(0, d_z).into_owned();
    let eta = sol.rows(d_z, d_eq).into_owned();
    let v = &x + &state.mu;
    let z = project_box(&v, &problem.l, &problem.u);
    let mu = &v - &z;
    IterationState {
        x,
        z,
        mu,
        eta,
        k: state.k + 1,
    }
}

/// Primal and dual residual norms for the consensus splitting:
/// r = ||x - z||_2, s = rho ||z - z_prev||_2.
pub fn residual_norms(
    z_prev: &DVector<f64>,
    x: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
) -> (f64, f64) {
    ((x - z).norm(), rho * (z - z_prev).norm())
}

/// Runs ADMM until both residuals are below tolerance or `max_iter` is hit.
/// Non-convergence is not an error; the returned solution carries
/// `converged = false`.
pub fn admm_solve(
    problem: &QpProblem,
    config: &SolverConfig,
    warm_start: Option<&QpSolution>,
) -> Result<QpSolution> {
    assert!(config.rho > 0.0 && config.eps_primal > 0.0 && config.eps_dual > 0.0);
    assert!(config.max_iter >= 1);
    let factorization = factorize_kkt(problem, config.rho)?;
    solve_with_factorization(problem, config, &factorization, warm_start)
}

/// Same as [`admm_solve`] with a caller-provided factorization, so a batch
/// sharing (Q, A, rho) factorizes once.
pub fn solve_with_factorization(
    problem: &QpProblem,
    config: &SolverConfig,
    factorization: &KktFactorization,
    warm_start: Option<&QpSolution>,
) -> Result<QpSolution> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let mut state = match warm_start {
        Some(prev) => IterationState {
            x: prev.x_star.clone(),
            z: prev.z_star.clone(),
            mu: prev.mu_star.clone(),
            eta: prev.eta_star.clone(),
            k: 0,
        },
        None => IterationState::cold_start(d_z, d_eq),
    };
    let mut trace = config.record_trace.then(|| SolveTrace {
        rho: config.rho,
        z0: state.z.clone(),
        mu0: state.mu.clone(),
        steps: Vec::new(),
    });

    let mut converged = false;
    // max_iter >= 1, so the loop body always assigns these.
    let (mut r_norm, mut s_norm);
    // v* pairs the last solve's x with the mu preceding it.
    let mut v_star;
    loop {
        let mu_prev = state.mu.clone();
        let z_prev = state.z.clone();
        let next = admm_step(&state, factorization, problem);
        v_star = &next.x + &mu_prev;
        (r_norm, s_norm) = residual_norms(&z_prev, &next.x, &next.z, config.rho);
        if let Some(t) = trace.as_mut() {
            t.steps.push(TraceStep {
                x: next.x.clone(),
                eta: next.eta.clone(),
                z: next.z.clone(),
                mu: next.mu.clone(),
            });
        }
        state = next;
        if r_norm <= config.eps_primal && s_norm <= config.eps_dual {
            converged = true;
            break;
        }
        if state.k >= config.max_iter {
            break;
        }
    }

    Ok(QpSolution {
        z_star: state.z,
        x_star: state.x,
        eta_star: state.eta,
        mu_star: state.mu,
        v_star,
        rho: config.rho,
        iterations: state.k,
        primal_residual: r_norm,
        dual_residual: s_norm,
        converged,
        trace,
    })
}

/// Recovers the nonnegative box multipliers from the scaled dual:
/// lambda_minus = -min(rho mu, 0), lambda_plus = max(rho mu, 0).
pub fn recover_duals(mu_star: &DVector<f64>, rho: f64) -> DualPair {
    let n = mu_star.len();
    DualPair {
        lambda_minus: DVector::from_fn(n, |j, _| -(rho * mu_star[j]).min(0.0)),
        lambda_plus: DVector::from_fn(n, |j, _| (rho * mu_star[j]).max(0.0)),
    }
}
