//! Backward-pass engines: map an incoming loss gradient at the solution to a
//! [`GradientBundle`] over all problem variables.
//!
//! Three routes are provided. Fixed-point implicit differentiation solves a
//! (d_z + d_eq) system built from the residual map of the modified ADMM
//! fixed-point iteration. KKT implicit differentiation solves the
//! (d_z + n_ineq + d_eq) system of the differentiated optimality conditions
//! (3 d_z + d_eq when every bound is finite). Unrolled differentiation runs a
//! hand-coded adjoint sweep over the recorded forward iterations.

use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use crate::admm::{build_kkt_matrix, factorize_kkt, lu_checked, recover_duals};
use crate::core::{GradientBundle, QpProblem, QpSolution, SolveTrace};
use crate::error::{QpError, Result};

/// Entries of mu smaller than this are treated as exactly zero when forming
/// the reciprocal in the box-bound gradients.
const MU_ZERO_TOL: f64 = 1e-12;

/// Backward engine selection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackwardMethod {
    FixedPoint,
    KktImplicit,
    Unrolled,
}

impl BackwardMethod {
    pub fn label(&self) -> &'static str {
        match self {
            BackwardMethod::FixedPoint => "fp",
            BackwardMethod::KktImplicit => "kkt",
            BackwardMethod::Unrolled => "unroll",
        }
    }
}

impl FromStr for BackwardMethod {
    type Err = QpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fp" | "fixed-point" => Ok(BackwardMethod::FixedPoint),
            "kkt" => Ok(BackwardMethod::KktImplicit),
            "unroll" | "unrolled" => Ok(BackwardMethod::Unrolled),
            other => Err(QpError::Parse(format!("unknown backward method '{other}'"))),
        }
    }
}

/// Derivative of the box projection at `v`: 1 on the closed interval
/// [l_j, u_j], 0 outside. Boundary contact counts as inside.
pub fn projection_mask(v: &DVector<f64>, l: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    DVector::from_fn(v.len(), |j, _| {
        if v[j] >= l[j] && v[j] <= u[j] {
            1.0
        } else {
            0.0
        }
    })
}

/// Residual F(v, eta) - (v, eta) of the modified fixed-point map; zero (to
/// solver tolerance) at a converged solution.
pub fn fixed_point_residual(
    problem: &QpProblem,
    rho: f64,
    v: &DVector<f64>,
    eta: &DVector<f64>,
) -> Result<DVector<f64>> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let factorization = factorize_kkt(problem, rho)?;
    let pi_v = crate::admm::project_box(v, &problem.l, &problem.u);
    let mut rhs = DVector::zeros(d_z + d_eq);
    for j in 0..d_z {
        rhs[j] = problem.p[j] - rho * (2.0 * pi_v[j] - v[j]);
    }
    for i in 0..d_eq {
        rhs[d_z + i] = -problem.b[i];
    }
    let solved = factorization.solve(&rhs);
    let mut residual = -solved;
    for j in 0..d_z {
        residual[j] -= pi_v[j];
    }
    for i in 0..d_eq {
        residual[d_z + i] -= eta[i];
    }
    Ok(residual)
}

/// Left-hand matrix of the fixed-point backward system,
/// diag([mask; I]) * M + [[-rho (2 diag(mask) - I), 0], [0, 0]],
/// of size (d_z + d_eq)^2.
pub fn build_fixed_point_matrix(
    problem: &QpProblem,
    rho: f64,
    mask: &DVector<f64>,
) -> DMatrix<f64> {
    let d_z = problem.dim();
    let mut m = build_kkt_matrix(problem, rho);
    for j in 0..d_z {
        let d = mask[j];
        for c in 0..m.ncols() {
            m[(j, c)] *= d;
        }
        m[(j, j)] -= rho * (2.0 * d - 1.0);
    }
    m
}

/// Fixed-point implicit differentiation (the small-system route).
pub fn backward_fixed_point(
    problem: &QpProblem,
    solution: &QpSolution,
    grad_z: &DVector<f64>,
) -> Result<GradientBundle> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    assert_eq!(grad_z.len(), d_z);
    let rho = solution.rho;
    let mask = projection_mask(&solution.v_star, &problem.l, &problem.u);
    let system = build_fixed_point_matrix(problem, rho, &mask);
    let lu = lu_checked(system).map_err(|_| QpError::SingularBackwardSystem)?;
    let mut rhs = DVector::zeros(d_z + d_eq);
    for j in 0..d_z {
        rhs[j] = -mask[j] * grad_z[j];
    }
    let sol = lu.solve(&rhs).ok_or(QpError::SingularBackwardSystem)?;
    let d_x = sol.rows(0, d_z).into_owned();
    let d_eta = sol.rows(d_z, d_eq).into_owned();

    let x = &solution.x_star;
    let dq = (&d_x * x.transpose() + x * d_x.transpose()) * 0.5;
    let da = &d_eta * x.transpose() + &solution.eta_star * d_x.transpose();
    let db = -&d_eta;

    // Box-bound gradients via the mu-tilde reciprocal trick.
    let lam = recover_duals(&solution.mu_star, rho);
    let stat = -grad_z - &problem.q * &d_x - problem.a.transpose() * &d_eta;
    let mut dl = DVector::zeros(d_z);
    let mut du = DVector::zeros(d_z);
    for j in 0..d_z {
        let mu_tilde = if solution.mu_star[j].abs() < MU_ZERO_TOL {
            1.0
        } else {
            solution.mu_star[j]
        };
        let d_lambda_j = stat[j] / (rho * mu_tilde);
        dl[j] = lam.lambda_minus[j] * d_lambda_j;
        du[j] = -lam.lambda_plus[j] * d_lambda_j;
    }

    Ok(GradientBundle {
        dq,
        dp: d_x,
        da,
        db,
        dl,
        du,
    })
}

/// Row layout of the KKT backward system for a problem: indices of variables
/// with a finite lower / upper bound. Infinite bounds contribute no rows.
pub fn finite_bound_rows(problem: &QpProblem) -> (Vec<usize>, Vec<usize>) {
    let lower: Vec<usize> = (0..problem.dim())
        .filter(|&j| problem.l[j].is_finite())
        .collect();
    let upper: Vec<usize> = (0..problem.dim())
        .filter(|&j| problem.u[j].is_finite())
        .collect();
    (lower, upper)
}

/// Left-hand matrix of the differentiated KKT system,
/// [[Q, G' diag(lambda), A'], [G, diag(Gz - h), 0], [A, 0, 0]],
/// with G/h built from the finite bounds only. Size is 3 d_z + d_eq when all
/// bounds are finite.
pub fn build_kkt_backward_matrix(problem: &QpProblem, solution: &QpSolution) -> DMatrix<f64> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let (lower, upper) = finite_bound_rows(problem);
    let n_ineq = lower.len() + upper.len();
    let n = d_z + n_ineq + d_eq;
    let lam = recover_duals(&solution.mu_star, solution.rho);
    let z = &solution.z_star;

    let mut k = DMatrix::zeros(n, n);
    k.view_mut((0, 0), (d_z, d_z)).copy_from(&problem.q);
    for (r, &j) in lower.iter().enumerate() {
        let row = d_z + r;
        // G row is -e_j, h entry is -l_j.
        k[(j, row)] = -lam.lambda_minus[j];
        k[(row, j)] = -1.0;
        k[(row, row)] = problem.l[j] - z[j];
    }
    for (r, &j) in upper.iter().enumerate() {
        let row = d_z + lower.len() + r;
        k[(j, row)] = lam.lambda_plus[j];
        k[(row, j)] = 1.0;
        k[(row, row)] = z[j] - problem.u[j];
    }
    if d_eq > 0 {
        let col = d_z + n_ineq;
        k.view_mut((0, col), (d_z, d_eq))
            .copy_from(&problem.a.transpose());
        k.view_mut((col, 0), (d_eq, d_z)).copy_from(&problem.a);
    }
    k
}

/// KKT implicit differentiation (the large-system route).
pub fn backward_kkt(
    problem: &QpProblem,
    solution: &QpSolution,
    grad_z: &DVector<f64>,
) -> Result<GradientBundle> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    assert_eq!(grad_z.len(), d_z);
    let (lower, upper) = finite_bound_rows(problem);
    let n_ineq = lower.len() + upper.len();
    let system = build_kkt_backward_matrix(problem, solution);
    let lu = lu_checked(system).map_err(|_| QpError::SingularBackwardSystem)?;
    let mut rhs = DVector::zeros(d_z + n_ineq + d_eq);
    for j in 0..d_z {
        rhs[j] = -grad_z[j];
    }
    let sol = lu.solve(&rhs).ok_or(QpError::SingularBackwardSystem)?;
    let d_zv = sol.rows(0, d_z).into_owned();
    let d_lambda = sol.rows(d_z, n_ineq).into_owned();
    let d_eta = sol.rows(d_z + n_ineq, d_eq).into_owned();

    let z = &solution.z_star;
    let dq = (&d_zv * z.transpose() + z * d_zv.transpose()) * 0.5;
    let da = &d_eta * z.transpose() + &solution.eta_star * d_zv.transpose();
    let db = -&d_eta;

    // dh = -diag(lambda) d_lambda; the h blocks are (-l, u).
    let lam = recover_duals(&solution.mu_star, solution.rho);
    let mut dl = DVector::zeros(d_z);
    let mut du = DVector::zeros(d_z);
    for (r, &j) in lower.iter().enumerate() {
        dl[j] = lam.lambda_minus[j] * d_lambda[r];
    }
    for (r, &j) in upper.iter().enumerate() {
        du[j] = -lam.lambda_plus[j] * d_lambda[lower.len() + r];
    }

    Ok(GradientBundle {
        dq,
        dp: d_zv,
        da,
        db,
        dl,
        du,
    })
}

/// Unrolled differentiation: reverse adjoint sweep over the recorded forward
/// iterations. Every iteration's linear solve contributes to dQ/dA/dp/db; the
/// projection routes clipped adjoints into dl/du.
pub fn backward_unrolled(
    problem: &QpProblem,
    trace: &SolveTrace,
    grad_z: &DVector<f64>,
) -> Result<GradientBundle> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    assert_eq!(grad_z.len(), d_z);
    let factorization = factorize_kkt(problem, trace.rho)?;
    let rho = trace.rho;

    let mut dq_raw = DMatrix::zeros(d_z, d_z);
    let mut bundle = GradientBundle::zeros(d_z, d_eq);
    let mut z_bar = grad_z.clone();
    let mut mu_bar = DVector::zeros(d_z);

    for k in (0..trace.steps.len()).rev() {
        let step = &trace.steps[k];
        let mu_prev = if k == 0 {
            &trace.mu0
        } else {
            &trace.steps[k - 1].mu
        };
        let v = &step.x + mu_prev;

        // mu^{k+1} = v^k - z^{k+1}
        let z_adj = &z_bar - &mu_bar;
        let mut v_adj = mu_bar.clone();
        // z^{k+1} = proj(v^k): interior adjoint flows to v, clipped adjoint
        // flows to the active bound itself.
        for j in 0..d_z {
            if v[j] < problem.l[j] {
                bundle.dl[j] += z_adj[j];
            } else if v[j] > problem.u[j] {
                bundle.du[j] += z_adj[j];
            } else {
                v_adj[j] += z_adj[j];
            }
        }

        // v^k = x^{k+1} + mu^k
        let x_adj = v_adj.clone();
        let mut mu_prev_bar = v_adj;

        // (x^{k+1}, eta^{k+1}) = M^{-1} [-(p - rho (z^k - mu^k)); b]
        let mut seed = DVector::zeros(d_z + d_eq);
        seed.rows_mut(0, d_z).copy_from(&x_adj);
        let s = factorization.solve(&seed);
        let s_x = s.rows(0, d_z).into_owned();
        let s_eta = s.rows(d_z, d_eq).into_owned();

        bundle.dp -= &s_x;
        bundle.db += &s_eta;
        let z_prev_bar = &s_x * rho;
        mu_prev_bar -= &s_x * rho;

        // Matrix-dependence adjoint: dM += -s [x; eta]^T.
        dq_raw -= &s_x * step.x.transpose();
        if d_eq > 0 {
            bundle.da -= &s_eta * step.x.transpose();
            bundle.da -= &step.eta * s_x.transpose();
        }

        z_bar = z_prev_bar;
        mu_bar = mu_prev_bar;
    }

    bundle.dq = (&dq_raw + dq_raw.transpose()) * 0.5;
    Ok(bundle)
}

/// Dispatches on `method` and reports the wall-clock time spent inside the
/// engine. `Unrolled` requires a recorded trace.
pub fn backward(
    problem: &QpProblem,
    solution: &QpSolution,
    grad_z: &DVector<f64>,
    method: BackwardMethod,
) -> Result<(GradientBundle, Duration)> {
    let start = Instant::now();
    let bundle = match method {
        BackwardMethod::FixedPoint => backward_fixed_point(problem, solution, grad_z)?,
        BackwardMethod::KktImplicit => backward_kkt(problem, solution, grad_z)?,
        BackwardMethod::Unrolled => {
            let trace = solution.trace.as_ref().ok_or(QpError::MissingTrace)?;
            backward_unrolled(problem, trace, grad_z)?
        }
    };
    Ok((bundle, start.elapsed()))
}
