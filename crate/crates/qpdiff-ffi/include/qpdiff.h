#ifndef QPDIFF_H
#define QPDIFF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Backward engine selector for qpdiff_backward.
 */
typedef enum QpdiffMethod {
  FixedPoint = 0,
  KktImplicit = 1,
  Unrolled = 2,
} QpdiffMethod;

/**
 * Status code returned by every fallible call.
 */
typedef enum QpdiffStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  DimensionMismatch = 3,
  BoundsInverted = 4,
  AsymmetricQ = 5,
  SingularSystem = 6,
  MissingTrace = 7,
  InternalError = 8,
} QpdiffStatus;

/**
 * Opaque gradient-bundle handle.
 */
typedef struct QpdiffGradient QpdiffGradient;

/**
 * Opaque validated problem handle.
 */
typedef struct QpdiffProblem QpdiffProblem;

/**
 * Opaque solution handle.
 */
typedef struct QpdiffSolution QpdiffSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Validates and stores a problem
 *   minimize 1/2 z'Qz + p'z  s.t.  Az = b, l <= z <= u.
 *
 * `q` is d_z*d_z row-major, `a` is d_eq*d_z row-major (may be null when
 * d_eq = 0). Infinite bounds are passed as IEEE infinities. On success
 * `*out` owns the handle.
 *
 * # Safety
 * All non-null pointers must reference buffers of the documented lengths.
 */
enum QpdiffStatus qpdiff_problem_new(uintptr_t d_z,
                                     uintptr_t d_eq,
                                     const double *q,
                                     const double *p,
                                     const double *a,
                                     const double *b,
                                     const double *l,
                                     const double *u,
                                     struct QpdiffProblem **out);

/**
 * Releases a problem handle; null is a no-op.
 *
 * # Safety
 * `problem` must come from qpdiff_problem_new and not be freed twice.
 */
void qpdiff_problem_free(struct QpdiffProblem *problem);

/**
 * Runs the ADMM solver. `record_trace` must be nonzero when the unrolled
 * backward engine will be used. Non-convergence is reported through
 * qpdiff_solution_converged, not as an error.
 *
 * # Safety
 * `problem` must be a live handle from qpdiff_problem_new.
 */
enum QpdiffStatus qpdiff_solve(const struct QpdiffProblem *problem,
                               double rho,
                               double eps,
                               uintptr_t max_iter,
                               int32_t record_trace,
                               struct QpdiffSolution **out);

/**
 * Releases a solution handle; null is a no-op.
 *
 * # Safety
 * `solution` must come from qpdiff_solve and not be freed twice.
 */
void qpdiff_solution_free(struct QpdiffSolution *solution);

/**
 * Copies the primal solution into `z` (length d_z).
 *
 * # Safety
 * `solution` must be live; `z` must hold `len` doubles.
 */
enum QpdiffStatus qpdiff_solution_z(const struct QpdiffSolution *solution,
                                    double *z,
                                    uintptr_t len);

/**
 * Copies the equality duals into `eta` (length d_eq).
 *
 * # Safety
 * `solution` must be live; `eta` must hold `len` doubles.
 */
enum QpdiffStatus qpdiff_solution_eta(const struct QpdiffSolution *solution,
                                      double *eta,
                                      uintptr_t len);

/**
 * Iteration count of the solve.
 *
 * # Safety
 * `solution` must be live.
 */
uintptr_t qpdiff_solution_iterations(const struct QpdiffSolution *solution);

/**
 * 1 when both residuals met tolerance, else 0.
 *
 * # Safety
 * `solution` must be live.
 */
int32_t qpdiff_solution_converged(const struct QpdiffSolution *solution);

/**
 * Final primal and dual residual norms.
 *
 * # Safety
 * All pointers must be live/writable.
 */
enum QpdiffStatus qpdiff_solution_residuals(const struct QpdiffSolution *solution,
                                            double *primal,
                                            double *dual);

/**
 * Differentiates the loss whose gradient in z* is `grad_z` (length d_z)
 * back onto the problem data.
 *
 * # Safety
 * `problem` and `solution` must be live handles from the same problem;
 * `grad_z` must hold d_z doubles.
 */
enum QpdiffStatus qpdiff_backward(const struct QpdiffProblem *problem,
                                  const struct QpdiffSolution *solution,
                                  const double *grad_z,
                                  enum QpdiffMethod method,
                                  struct QpdiffGradient **out);

/**
 * Releases a gradient handle; null is a no-op.
 *
 * # Safety
 * `gradient` must come from qpdiff_backward and not be freed twice.
 */
void qpdiff_gradient_free(struct QpdiffGradient *gradient);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QPDIFF_H */
