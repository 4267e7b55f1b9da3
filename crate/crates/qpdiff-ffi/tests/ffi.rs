//! Exercises the C ABI end to end from Rust: construct, solve, differentiate
//! and free through raw pointers exactly as a C caller would.

use std::ptr;

use qpdiff_ffi::*;

const D_Z: usize = 2;

type ProblemData = ([f64; 4], [f64; 2], [f64; 2], [f64; 1], [f64; 2], [f64; 2]);

fn problem_data() -> ProblemData {
    (
        [2.0, 0.0, 0.0, 2.0],
        [-1.0, -1.0],
        [1.0, 1.0],
        [1.0],
        [0.0, 0.0],
        [1.0, 1.0],
    )
}

unsafe fn new_problem() -> *mut QpdiffProblem {
    let (q, p, a, b, l, u) = problem_data();
    let mut handle: *mut QpdiffProblem = ptr::null_mut();
    let status = qpdiff_problem_new(
        D_Z,
        1,
        q.as_ptr(),
        p.as_ptr(),
        a.as_ptr(),
        b.as_ptr(),
        l.as_ptr(),
        u.as_ptr(),
        &mut handle,
    );
    assert_eq!(status, QpdiffStatus::Ok);
    assert!(!handle.is_null());
    handle
}

#[test]
fn solve_and_backward_through_the_abi() {
    unsafe {
        let problem = new_problem();
        let mut solution: *mut QpdiffSolution = ptr::null_mut();
        let status = qpdiff_solve(problem, 1.0, 1e-10, 10_000, 1, &mut solution);
        assert_eq!(status, QpdiffStatus::Ok);
        assert_eq!(qpdiff_solution_converged(solution), 1);
        assert!(qpdiff_solution_iterations(solution) >= 1);

        let mut z = [0.0; D_Z];
        assert_eq!(
            qpdiff_solution_z(solution, z.as_mut_ptr(), D_Z),
            QpdiffStatus::Ok
        );
        // Symmetric instance: the equality row splits the budget evenly.
        assert!((z[0] - 0.5).abs() < 1e-8 && (z[1] - 0.5).abs() < 1e-8);

        let mut primal = f64::NAN;
        let mut dual = f64::NAN;
        assert_eq!(
            qpdiff_solution_residuals(solution, &mut primal, &mut dual),
            QpdiffStatus::Ok
        );
        assert!(primal <= 1e-10 && dual <= 1e-10);

        let grad = [1.0, -1.0];
        for method in [
            QpdiffMethod::FixedPoint,
            QpdiffMethod::KktImplicit,
            QpdiffMethod::Unrolled,
        ] {
            let mut gradient: *mut QpdiffGradient = ptr::null_mut();
            let status = qpdiff_backward(problem, solution, grad.as_ptr(), method, &mut gradient);
            assert_eq!(status, QpdiffStatus::Ok);
            let mut dp = [0.0; D_Z];
            assert_eq!(
                qpdiff_gradient_dp(gradient, dp.as_mut_ptr(), D_Z),
                QpdiffStatus::Ok
            );
            // Solving the 3x3 KKT system by hand with loss gradient [1, -1]
            // gives dp = [-1/2, 1/2] on the budget-reduced subspace. The
            // symmetric toy instance converges in a handful of iterations,
            // so the unrolled K-step derivative is visibly truncated.
            let tol = if method == QpdiffMethod::Unrolled { 0.1 } else { 1e-6 };
            assert!((dp[0] + 0.5).abs() < tol, "{method:?}: {dp:?}");
            assert!((dp[1] - 0.5).abs() < tol, "{method:?}: {dp:?}");
            let mut dq = [0.0; D_Z * D_Z];
            assert_eq!(
                qpdiff_gradient_dq(gradient, dq.as_mut_ptr(), D_Z * D_Z),
                QpdiffStatus::Ok
            );
            // dQ symmetry survives the row-major copy-out.
            assert_eq!(dq[1], dq[2]);
            qpdiff_gradient_free(gradient);
        }

        qpdiff_solution_free(solution);
        qpdiff_problem_free(problem);
    }
}

#[test]
fn status_codes_for_bad_input() {
    unsafe {
        let (q, p, a, b, l, u) = problem_data();
        let mut handle: *mut QpdiffProblem = ptr::null_mut();

        assert_eq!(
            qpdiff_problem_new(
                D_Z,
                1,
                ptr::null(),
                p.as_ptr(),
                a.as_ptr(),
                b.as_ptr(),
                l.as_ptr(),
                u.as_ptr(),
                &mut handle
            ),
            QpdiffStatus::NullPointer
        );

        let inverted = [2.0, 2.0];
        assert_eq!(
            qpdiff_problem_new(
                D_Z,
                1,
                q.as_ptr(),
                p.as_ptr(),
                a.as_ptr(),
                b.as_ptr(),
                inverted.as_ptr(),
                l.as_ptr(),
                &mut handle
            ),
            QpdiffStatus::BoundsInverted
        );

        let problem = new_problem();
        let mut solution: *mut QpdiffSolution = ptr::null_mut();
        assert_eq!(
            qpdiff_solve(problem, -1.0, 1e-8, 100, 0, &mut solution),
            QpdiffStatus::InvalidArgument
        );
        assert_eq!(
            qpdiff_solve(problem, 1.0, 1e-8, 100, 0, &mut solution),
            QpdiffStatus::Ok
        );

        // Unrolled backward without a recorded trace.
        let grad = [1.0, 0.0];
        let mut gradient: *mut QpdiffGradient = ptr::null_mut();
        assert_eq!(
            qpdiff_backward(
                problem,
                solution,
                grad.as_ptr(),
                QpdiffMethod::Unrolled,
                &mut gradient
            ),
            QpdiffStatus::MissingTrace
        );

        // Wrong copy-out length.
        let mut too_short = [0.0; 1];
        assert_eq!(
            qpdiff_solution_z(solution, too_short.as_mut_ptr(), 1),
            QpdiffStatus::DimensionMismatch
        );

        qpdiff_solution_free(solution);
        qpdiff_problem_free(problem);
        qpdiff_problem_free(ptr::null_mut()); // null free is a no-op
    }
}
