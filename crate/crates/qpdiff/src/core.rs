//! Domain types, validation and deterministic problem generation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{QpError, Result};

/// Relative asymmetry tolerance below which Q is symmetrized instead of rejected.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// A quadratic program
///   minimize    1/2 z'Qz + p'z
///   subject to  Az = b,  l <= z <= u
/// with Q symmetric positive definite. Entries of `l`/`u` may be
/// `f64::NEG_INFINITY` / `f64::INFINITY`; infinite bounds are treated as
/// never active. `d_eq` may be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub q: DMatrix<f64>,
    pub p: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub l: DVector<f64>,
    pub u: DVector<f64>,
}

impl QpProblem {
    /// Validates dimensions, bounds ordering and symmetry of `Q`.
    ///
    /// Q is replaced by (Q + Q')/2 when its relative asymmetry is at most
    /// [`SYMMETRY_TOL`]; larger asymmetry is rejected. Positive definiteness
    /// of Q and full row rank of A are checked later by factorization
    /// success, not here.
    pub fn new(
        q: DMatrix<f64>,
        p: DVector<f64>,
        a: DMatrix<f64>,
        b: DVector<f64>,
        l: DVector<f64>,
        u: DVector<f64>,
    ) -> Result<Self> {
        let d_z = q.nrows();
        if q.ncols() != d_z {
            return Err(QpError::DimensionMismatch(format!(
                "Q must be square, got {}x{}",
                q.nrows(),
                q.ncols()
            )));
        }
        for (name, len) in [("p", p.len()), ("l", l.len()), ("u", u.len())] {
            if len != d_z {
                return Err(QpError::DimensionMismatch(format!(
                    "{name} has length {len}, expected {d_z}"
                )));
            }
        }
        if a.nrows() != b.len() || (a.nrows() > 0 && a.ncols() != d_z) {
            return Err(QpError::DimensionMismatch(format!(
                "A is {}x{} with b of length {}, expected {}x{d_z} and matching b",
                a.nrows(),
                a.ncols(),
                b.len(),
                a.nrows()
            )));
        }
        for j in 0..d_z {
            if l[j] > u[j] {
                return Err(QpError::BoundsInverted {
                    index: j,
                    lower: l[j],
                    upper: u[j],
                });
            }
        }
        let asym = (&q - q.transpose()).norm();
        let scale = q.norm().max(1.0);
        if asym > SYMMETRY_TOL * scale {
            return Err(QpError::AsymmetricQ { rel: asym / scale });
        }
        let q = (&q + q.transpose()) * 0.5;
        Ok(QpProblem { q, p, a, b, l, u })
    }

    pub fn dim(&self) -> usize {
        self.q.nrows()
    }

    pub fn n_eq(&self) -> usize {
        self.a.nrows()
    }

    /// Objective value 1/2 z'Qz + p'z.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (&self.q * z).dot(z) + self.p.dot(z)
    }
}

/// ADMM solver parameters. `rho` is the (static) penalty, tolerances apply to
/// the L2 norms of the primal and dual residuals.
#[derive(Debug, Clone)]
pub struct SolverConfig {
    pub rho: f64,
    pub eps_primal: f64,
    pub eps_dual: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl SolverConfig {
    pub fn with_tolerance(eps: f64) -> Self {
        SolverConfig {
            eps_primal: eps,
            eps_dual: eps,
            ..SolverConfig::default()
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            rho: 1.0,
            eps_primal: 1e-6,
            eps_dual: 1e-6,
            max_iter: 10_000,
            record_trace: false,
        }
    }
}

/// Scaled box duals split into the nonnegative multipliers of the lower and
/// upper bound constraints. Exactly one side is zero at every coordinate.
#[derive(Debug, Clone)]
pub struct DualPair {
    pub lambda_minus: DVector<f64>,
    pub lambda_plus: DVector<f64>,
}

/// Loss gradients with respect to every problem variable of one instance.
#[derive(Debug, Clone)]
pub struct GradientBundle {
    pub dq: DMatrix<f64>,
    pub dp: DVector<f64>,
    pub da: DMatrix<f64>,
    pub db: DVector<f64>,
    pub dl: DVector<f64>,
    pub du: DVector<f64>,
}

impl GradientBundle {
    pub fn zeros(d_z: usize, d_eq: usize) -> Self {
        GradientBundle {
            dq: DMatrix::zeros(d_z, d_z),
            dp: DVector::zeros(d_z),
            da: DMatrix::zeros(d_eq, d_z),
            db: DVector::zeros(d_eq),
            dl: DVector::zeros(d_z),
            du: DVector::zeros(d_z),
        }
    }

    pub fn scale_mut(&mut self, c: f64) {
        self.dq *= c;
        self.dp *= c;
        self.da *= c;
        self.db *= c;
        self.dl *= c;
        self.du *= c;
    }

    pub fn add_assign(&mut self, other: &GradientBundle) {
        self.dq += &other.dq;
        self.dp += &other.dp;
        self.da += &other.da;
        self.db += &other.db;
        self.dl += &other.dl;
        self.du += &other.du;
    }
}

/// One recorded forward iteration: the state after the k-th full ADMM step.
#[derive(Debug, Clone)]
pub struct TraceStep {
    pub x: DVector<f64>,
    pub eta: DVector<f64>,
    pub z: DVector<f64>,
    pub mu: DVector<f64>,
}

/// Per-iteration record of a forward solve, needed by unrolled
/// differentiation. Memory cost is O(K * d_z) for K iterations.
#[derive(Debug, Clone)]
pub struct SolveTrace {
    pub rho: f64,
    pub z0: DVector<f64>,
    pub mu0: DVector<f64>,
    pub steps: Vec<TraceStep>,
}

/// Converged (or max-iteration) primal-dual state of a solve.
///
/// `v_star` is the fixed-point variable x* + mu of the last iteration, with
/// mu taken *before* its final update, matching the fixed-point map.
#[derive(Debug, Clone)]
pub struct QpSolution {
    pub z_star: DVector<f64>,
    pub x_star: DVector<f64>,
    pub eta_star: DVector<f64>,
    pub mu_star: DVector<f64>,
    pub v_star: DVector<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub converged: bool,
    pub trace: Option<SolveTrace>,
}

/// Benchmark-style random instance: Q = U'U/(2 d_z) with U standard normal
/// (2 d_z x d_z), p standard normal, l ~ U[-2,-1], u ~ U[1,2] per coordinate,
/// and the fully-invested constraint 1'z = 1.
///
/// Generation is a pure function of (d_z, seed). Fields are drawn from a
/// seeded ChaCha8 stream in the fixed order U, p, l, u.
pub fn generate_exp1_problem(d_z: usize, seed: u64) -> QpProblem {
    assert!(d_z >= 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u_mat = DMatrix::from_fn(2 * d_z, d_z, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = u_mat.transpose() * &u_mat / (2.0 * d_z as f64);
    let p = DVector::from_fn(d_z, |_, _| rng.sample::<f64, _>(StandardNormal));
    let l = DVector::from_fn(d_z, |_, _| rng.gen_range(-2.0..-1.0));
    let u = DVector::from_fn(d_z, |_, _| rng.gen_range(1.0..2.0));
    let a = DMatrix::from_element(1, d_z, 1.0);
    let b = DVector::from_element(1, 1.0);
    QpProblem::new(q, p, a, b, l, u).expect("generated instance is always well formed")
}
