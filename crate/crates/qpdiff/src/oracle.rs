//! Independent ground-truth machinery: a dense active-set reference solver
//! and central finite differences through it. Used by tests and acceptance
//! runs only; shares nothing with the ADMM path beyond the core types.

use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};

use crate::core::{QpProblem, QpSolution};
use crate::error::{QpError, Result};

const FEAS_TOL: f64 = 1e-11;
const MULT_TOL: f64 = 1e-11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Pin {
    Lower,
    Upper,
}

/// Solves the QP to high accuracy by a primal active-set method over the box
/// constraints: pin a working set of variables at a bound, solve the
/// equality-constrained KKT system, then swap in the most violated bound or
/// drop the pinned variable with the most wrong-signed multiplier.
///
/// Duals follow the ADMM convention with rho = 1: `mu_star` is
/// lambda_plus - lambda_minus and `v_star = z_star + mu_star`.
pub fn reference_solve(problem: &QpProblem) -> Result<QpSolution> {
    let d_z = problem.dim();
    let mut working: Vec<Option<Pin>> = vec![None; d_z];
    let cap = (d_z.max(1))
        .saturating_mul(1usize << d_z.min(20))
        .min(1_000_000);
    let mut seen: HashSet<Vec<(usize, Pin)>> = HashSet::new();

    for _ in 0..cap {
        let key: Vec<(usize, Pin)> = working
            .iter()
            .enumerate()
            .filter_map(|(j, w)| w.map(|p| (j, p)))
            .collect();
        if !seen.insert(key) {
            return Err(QpError::CyclingDetected);
        }

        let (z, eta) = solve_pinned(problem, &working)?;
        // Gradient of the Lagrangian without box multipliers.
        let g = &problem.q * &z + &problem.p + problem.a.transpose() * &eta;

        // Most violated free bound, if any. Keep at least d_eq variables
        // free so the reduced KKT system stays square and solvable; a
        // transient state that wants every variable pinned falls through to
        // the multiplier-drop step instead.
        let free_count = working.iter().filter(|w| w.is_none()).count();
        let can_pin = free_count > problem.n_eq();
        let mut worst_add: Option<(usize, Pin, f64)> = None;
        for j in 0..d_z {
            if working[j].is_some() {
                continue;
            }
            let (viol, pin) = if z[j] < problem.l[j] - FEAS_TOL {
                (problem.l[j] - z[j], Pin::Lower)
            } else if z[j] > problem.u[j] + FEAS_TOL {
                (z[j] - problem.u[j], Pin::Upper)
            } else {
                continue;
            };
            if worst_add.is_none_or(|(_, _, v)| viol > v) {
                worst_add = Some((j, pin, viol));
            }
        }
        if let Some((j, pin, _)) = worst_add {
            if can_pin {
                working[j] = Some(pin);
                continue;
            }
        }

        // Most wrong-signed pinned multiplier, if any. For a lower pin the
        // multiplier is g_j, for an upper pin it is -g_j; both must be >= 0.
        let mut worst_drop: Option<(usize, f64)> = None;
        for j in 0..d_z {
            let mult = match working[j] {
                Some(Pin::Lower) => g[j],
                Some(Pin::Upper) => -g[j],
                None => continue,
            };
            if mult < -MULT_TOL && worst_drop.is_none_or(|(_, m)| mult < m) {
                worst_drop = Some((j, mult));
            }
        }
        if let Some((j, _)) = worst_drop {
            working[j] = None;
            continue;
        }
        if worst_add.is_some() {
            // A bound is violated but pinning is blocked by the equality
            // rows and no pin can be dropped: no progress is possible.
            return Err(QpError::CyclingDetected);
        }

        // Optimal: assemble duals in the ADMM (eta, mu) convention, rho = 1.
        let mut mu = DVector::zeros(d_z);
        for j in 0..d_z {
            if working[j].is_some() {
                mu[j] = -g[j];
            }
        }
        let v = &z + &mu;
        return Ok(QpSolution {
            z_star: z.clone(),
            x_star: z,
            eta_star: eta,
            mu_star: mu,
            v_star: v,
            rho: 1.0,
            iterations: seen.len(),
            primal_residual: 0.0,
            dual_residual: 0.0,
            converged: true,
            trace: None,
        });
    }
    Err(QpError::CyclingDetected)
}

/// Equality-constrained KKT solve with the working set pinned at its bounds.
fn solve_pinned(
    problem: &QpProblem,
    working: &[Option<Pin>],
) -> Result<(DVector<f64>, DVector<f64>)> {
    let d_z = problem.dim();
    let d_eq = problem.n_eq();
    let free: Vec<usize> = (0..d_z).filter(|&j| working[j].is_none()).collect();
    let nf = free.len();

    let mut z = DVector::zeros(d_z);
    for j in 0..d_z {
        match working[j] {
            Some(Pin::Lower) => z[j] = problem.l[j],
            Some(Pin::Upper) => z[j] = problem.u[j],
            None => {}
        }
    }

    let n = nf + d_eq;
    let mut m = DMatrix::zeros(n, n);
    let mut rhs = DVector::zeros(n);
    for (r, &j) in free.iter().enumerate() {
        for (c, &k) in free.iter().enumerate() {
            m[(r, c)] = problem.q[(j, k)];
        }
        for i in 0..d_eq {
            m[(r, nf + i)] = problem.a[(i, j)];
            m[(nf + i, r)] = problem.a[(i, j)];
        }
        let mut qp_fixed = 0.0;
        for k in 0..d_z {
            if working[k].is_some() {
                qp_fixed += problem.q[(j, k)] * z[k];
            }
        }
        rhs[r] = -problem.p[j] - qp_fixed;
    }
    for i in 0..d_eq {
        let mut a_fixed = 0.0;
        for k in 0..d_z {
            if working[k].is_some() {
                a_fixed += problem.a[(i, k)] * z[k];
            }
        }
        rhs[nf + i] = problem.b[i] - a_fixed;
    }

    if n == 0 {
        return Ok((z, DVector::zeros(0)));
    }

    let lu = m.lu();
    let upper = lu.u();
    let mut min_pivot = f64::INFINITY;
    let mut max_pivot: f64 = 0.0;
    for i in 0..n {
        let d = upper[(i, i)].abs();
        min_pivot = min_pivot.min(d);
        max_pivot = max_pivot.max(d);
    }
    if min_pivot <= 1e-12 * max_pivot.max(1.0) || !min_pivot.is_finite() {
        return Err(QpError::SingularKkt);
    }
    let sol = lu.solve(&rhs).ok_or(QpError::SingularKkt)?;
    for (r, &j) in free.iter().enumerate() {
        z[j] = sol[r];
    }
    Ok((z, sol.rows(nf, d_eq).into_owned()))
}

/// Which problem variable a finite-difference probe perturbs.
#[derive(Debug, Clone, Copy)]
pub enum FdTarget {
    Q(usize, usize),
    P(usize),
    A(usize, usize),
    B(usize),
    L(usize),
    U(usize),
}

/// Central finite-difference specification.
#[derive(Debug, Clone, Copy)]
pub struct FdSpec {
    pub step: f64,
    pub target: FdTarget,
}

impl FdSpec {
    pub fn new(target: FdTarget) -> Self {
        FdSpec {
            step: 1e-5,
            target,
        }
    }
}

fn perturbed(problem: &QpProblem, target: FdTarget, h: f64) -> QpProblem {
    let mut p = problem.clone();
    match target {
        // Off-diagonal Q probes perturb (j,k) and (k,j) by h/2 each so the
        // direction stays in symmetric space.
        FdTarget::Q(j, k) if j == k => p.q[(j, j)] += h,
        FdTarget::Q(j, k) => {
            p.q[(j, k)] += 0.5 * h;
            p.q[(k, j)] += 0.5 * h;
        }
        FdTarget::P(j) => p.p[j] += h,
        FdTarget::A(i, j) => p.a[(i, j)] += h,
        FdTarget::B(i) => p.b[i] += h,
        FdTarget::L(j) => p.l[j] += h,
        FdTarget::U(j) => p.u[j] += h,
    }
    p
}

/// Central difference of `loss(z*(theta))` through the reference solver.
pub fn fd_gradient<F>(problem: &QpProblem, loss: F, spec: &FdSpec) -> Result<f64>
where
    F: Fn(&DVector<f64>) -> f64,
{
    assert!(spec.step > 0.0);
    let plus = reference_solve(&perturbed(problem, spec.target, spec.step))?;
    let minus = reference_solve(&perturbed(problem, spec.target, -spec.step))?;
    Ok((loss(&plus.z_star) - loss(&minus.z_star)) / (2.0 * spec.step))
}

/// True when every coordinate of `v` keeps at least `margin` distance from
/// both bounds, on either side. The solution map is differentiable there;
/// finite-difference tests skip anything else.
pub fn strictly_complementary(problem: &QpProblem, v: &DVector<f64>, margin: f64) -> bool {
    (0..problem.dim()).all(|j| {
        (v[j] - problem.l[j]).abs() >= margin && (problem.u[j] - v[j]).abs() >= margin
    })
}
