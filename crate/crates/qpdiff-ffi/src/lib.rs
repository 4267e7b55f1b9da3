//! C ABI over the qpdiff solver: opaque handles, status codes, and copy-out
//! getters. The generated header lands in `include/qpdiff.h`.
//!
//! Matrices cross the boundary in row-major order. All `out` buffers are
//! caller-allocated with the documented length; handles are freed with the
//! matching `_free` function and must not be used afterwards.

use std::ptr;
use std::slice;

use nalgebra::{DMatrix, DVector};
use qpdiff::admm::admm_solve;
use qpdiff::core::{QpProblem, QpSolution, SolverConfig};
use qpdiff::diff::{backward, BackwardMethod};
use qpdiff::core::GradientBundle;
use qpdiff::QpError;

/// Status code returned by every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpdiffStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    BoundsInverted = 4,
    AsymmetricQ = 5,
    SingularSystem = 6,
    MissingTrace = 7,
    InternalError = 8,
}

impl From<&QpError> for QpdiffStatus {
    fn from(e: &QpError) -> Self {
        match e {
            QpError::DimensionMismatch(_) => QpdiffStatus::DimensionMismatch,
            QpError::BoundsInverted { .. } => QpdiffStatus::BoundsInverted,
            QpError::AsymmetricQ { .. } => QpdiffStatus::AsymmetricQ,
            QpError::SingularKkt | QpError::SingularBackwardSystem => {
                QpdiffStatus::SingularSystem
            }
            QpError::MissingTrace => QpdiffStatus::MissingTrace,
            _ => QpdiffStatus::InternalError,
        }
    }
}

/// Backward engine selector for qpdiff_backward.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpdiffMethod {
    FixedPoint = 0,
    KktImplicit = 1,
    Unrolled = 2,
}

/// Opaque validated problem handle.
pub struct QpdiffProblem {
    inner: QpProblem,
}

/// Opaque solution handle.
pub struct QpdiffSolution {
    inner: QpSolution,
}

/// Opaque gradient-bundle handle.
pub struct QpdiffGradient {
    inner: GradientBundle,
    d_z: usize,
    d_eq: usize,
}

unsafe fn read_vec(ptr: *const f64, len: usize) -> Option<DVector<f64>> {
    if ptr.is_null() && len > 0 {
        return None;
    }
    if len == 0 {
        return Some(DVector::zeros(0));
    }
    Some(DVector::from_column_slice(slice::from_raw_parts(ptr, len)))
}

unsafe fn read_mat(ptr: *const f64, rows: usize, cols: usize) -> Option<DMatrix<f64>> {
    let n = rows * cols;
    if ptr.is_null() && n > 0 {
        return None;
    }
    if n == 0 {
        return Some(DMatrix::zeros(rows, cols));
    }
    Some(DMatrix::from_row_slice(
        rows,
        cols,
        slice::from_raw_parts(ptr, n),
    ))
}

unsafe fn write_slice(src: &[f64], dst: *mut f64, dst_len: usize) -> QpdiffStatus {
    if dst.is_null() {
        return QpdiffStatus::NullPointer;
    }
    if dst_len != src.len() {
        return QpdiffStatus::DimensionMismatch;
    }
    ptr::copy_nonoverlapping(src.as_ptr(), dst, src.len());
    QpdiffStatus::Ok
}

/// Validates and stores a problem
///   minimize 1/2 z'Qz + p'z  s.t.  Az = b, l <= z <= u.
///
/// `q` is d_z*d_z row-major, `a` is d_eq*d_z row-major (may be null when
/// d_eq = 0). Infinite bounds are passed as IEEE infinities. On success
/// `*out` owns the handle.
///
/// # Safety
/// All non-null pointers must reference buffers of the documented lengths.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_problem_new(
    d_z: usize,
    d_eq: usize,
    q: *const f64,
    p: *const f64,
    a: *const f64,
    b: *const f64,
    l: *const f64,
    u: *const f64,
    out: *mut *mut QpdiffProblem,
) -> QpdiffStatus {
    if out.is_null() {
        return QpdiffStatus::NullPointer;
    }
    let (Some(q), Some(p), Some(a), Some(b), Some(l), Some(u)) = (
        read_mat(q, d_z, d_z),
        read_vec(p, d_z),
        read_mat(a, d_eq, d_z),
        read_vec(b, d_eq),
        read_vec(l, d_z),
        read_vec(u, d_z),
    ) else {
        return QpdiffStatus::NullPointer;
    };
    match QpProblem::new(q, p, a, b, l, u) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(QpdiffProblem { inner }));
            QpdiffStatus::Ok
        }
        Err(e) => QpdiffStatus::from(&e),
    }
}

/// Releases a problem handle; null is a no-op.
///
/// # Safety
/// `problem` must come from qpdiff_problem_new and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_problem_free(problem: *mut QpdiffProblem) {
    if !problem.is_null() {
        drop(Box::from_raw(problem));
    }
}

/// Runs the ADMM solver. `record_trace` must be nonzero when the unrolled
/// backward engine will be used. Non-convergence is reported through
/// qpdiff_solution_converged, not as an error.
///
/// # Safety
/// `problem` must be a live handle from qpdiff_problem_new.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solve(
    problem: *const QpdiffProblem,
    rho: f64,
    eps: f64,
    max_iter: usize,
    record_trace: i32,
    out: *mut *mut QpdiffSolution,
) -> QpdiffStatus {
    if problem.is_null() || out.is_null() {
        return QpdiffStatus::NullPointer;
    }
    // NaN parameters are rejected along with non-positive ones.
    if rho.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        || eps.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater)
        || max_iter == 0
    {
        return QpdiffStatus::InvalidArgument;
    }
    let config = SolverConfig {
        rho,
        eps_primal: eps,
        eps_dual: eps,
        max_iter,
        record_trace: record_trace != 0,
    };
    match admm_solve(&(*problem).inner, &config, None) {
        Ok(inner) => {
            *out = Box::into_raw(Box::new(QpdiffSolution { inner }));
            QpdiffStatus::Ok
        }
        Err(e) => QpdiffStatus::from(&e),
    }
}

/// Releases a solution handle; null is a no-op.
///
/// # Safety
/// `solution` must come from qpdiff_solve and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solution_free(solution: *mut QpdiffSolution) {
    if !solution.is_null() {
        drop(Box::from_raw(solution));
    }
}

/// Copies the primal solution into `z` (length d_z).
///
/// # Safety
/// `solution` must be live; `z` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solution_z(
    solution: *const QpdiffSolution,
    z: *mut f64,
    len: usize,
) -> QpdiffStatus {
    if solution.is_null() {
        return QpdiffStatus::NullPointer;
    }
    write_slice((*solution).inner.z_star.as_slice(), z, len)
}

/// Copies the equality duals into `eta` (length d_eq).
///
/// # Safety
/// `solution` must be live; `eta` must hold `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solution_eta(
    solution: *const QpdiffSolution,
    eta: *mut f64,
    len: usize,
) -> QpdiffStatus {
    if solution.is_null() {
        return QpdiffStatus::NullPointer;
    }
    write_slice((*solution).inner.eta_star.as_slice(), eta, len)
}

/// Iteration count of the solve.
///
/// # Safety
/// `solution` must be live.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solution_iterations(solution: *const QpdiffSolution) -> usize {
    if solution.is_null() {
        return 0;
    }
    (*solution).inner.iterations
}

/// 1 when both residuals met tolerance, else 0.
///
/// # Safety
/// `solution` must be live.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solution_converged(solution: *const QpdiffSolution) -> i32 {
    if solution.is_null() {
        return 0;
    }
    (*solution).inner.converged as i32
}

/// Final primal and dual residual norms.
///
/// # Safety
/// All pointers must be live/writable.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_solution_residuals(
    solution: *const QpdiffSolution,
    primal: *mut f64,
    dual: *mut f64,
) -> QpdiffStatus {
    if solution.is_null() || primal.is_null() || dual.is_null() {
        return QpdiffStatus::NullPointer;
    }
    *primal = (*solution).inner.primal_residual;
    *dual = (*solution).inner.dual_residual;
    QpdiffStatus::Ok
}

/// Differentiates the loss whose gradient in z* is `grad_z` (length d_z)
/// back onto the problem data.
///
/// # Safety
/// `problem` and `solution` must be live handles from the same problem;
/// `grad_z` must hold d_z doubles.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_backward(
    problem: *const QpdiffProblem,
    solution: *const QpdiffSolution,
    grad_z: *const f64,
    method: QpdiffMethod,
    out: *mut *mut QpdiffGradient,
) -> QpdiffStatus {
    if problem.is_null() || solution.is_null() || out.is_null() {
        return QpdiffStatus::NullPointer;
    }
    let p = &(*problem).inner;
    let Some(grad) = read_vec(grad_z, p.dim()) else {
        return QpdiffStatus::NullPointer;
    };
    let method = match method {
        QpdiffMethod::FixedPoint => BackwardMethod::FixedPoint,
        QpdiffMethod::KktImplicit => BackwardMethod::KktImplicit,
        QpdiffMethod::Unrolled => BackwardMethod::Unrolled,
    };
    match backward(p, &(*solution).inner, &grad, method) {
        Ok((inner, _)) => {
            *out = Box::into_raw(Box::new(QpdiffGradient {
                inner,
                d_z: p.dim(),
                d_eq: p.n_eq(),
            }));
            QpdiffStatus::Ok
        }
        Err(e) => QpdiffStatus::from(&e),
    }
}

/// Releases a gradient handle; null is a no-op.
///
/// # Safety
/// `gradient` must come from qpdiff_backward and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn qpdiff_gradient_free(gradient: *mut QpdiffGradient) {
    if !gradient.is_null() {
        drop(Box::from_raw(gradient));
    }
}

unsafe fn write_mat(m: &DMatrix<f64>, dst: *mut f64, dst_len: usize) -> QpdiffStatus {
    if dst.is_null() {
        return QpdiffStatus::NullPointer;
    }
    if dst_len != m.nrows() * m.ncols() {
        return QpdiffStatus::DimensionMismatch;
    }
    // Row-major copy-out.
    let mut k = 0;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            *dst.add(k) = m[(r, c)];
            k += 1;
        }
    }
    QpdiffStatus::Ok
}

macro_rules! gradient_getter {
    ($name:ident, vector $field:ident, $len:ident, $doc:literal) => {
        #[doc = $doc]
        ///
        /// # Safety
        /// `gradient` must be live; `out` must hold `len` doubles.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            gradient: *const QpdiffGradient,
            out: *mut f64,
            len: usize,
        ) -> QpdiffStatus {
            if gradient.is_null() {
                return QpdiffStatus::NullPointer;
            }
            let g = &*gradient;
            let _ = g.$len;
            write_slice(g.inner.$field.as_slice(), out, len)
        }
    };
    ($name:ident, matrix $field:ident, $doc:literal) => {
        #[doc = $doc]
        ///
        /// # Safety
        /// `gradient` must be live; `out` must hold `len` doubles.
        #[no_mangle]
        pub unsafe extern "C" fn $name(
            gradient: *const QpdiffGradient,
            out: *mut f64,
            len: usize,
        ) -> QpdiffStatus {
            if gradient.is_null() {
                return QpdiffStatus::NullPointer;
            }
            write_mat(&(*gradient).inner.$field, out, len)
        }
    };
}

gradient_getter!(qpdiff_gradient_dq, matrix dq, "Copies dQ (d_z*d_z, row-major).");
gradient_getter!(qpdiff_gradient_da, matrix da, "Copies dA (d_eq*d_z, row-major).");
gradient_getter!(qpdiff_gradient_dp, vector dp, d_z, "Copies dp (d_z).");
gradient_getter!(qpdiff_gradient_db, vector db, d_eq, "Copies db (d_eq).");
gradient_getter!(qpdiff_gradient_dl, vector dl, d_z, "Copies dl (d_z).");
gradient_getter!(qpdiff_gradient_du, vector du, d_z, "Copies du (d_z).");
