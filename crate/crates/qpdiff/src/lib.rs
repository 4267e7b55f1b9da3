//! Batch differentiable quadratic-programming layer.
//!
//! Solves parametric QPs with linear-equality and box constraints by ADMM and
//! maps an incoming loss gradient at the solution back to gradients with
//! respect to every problem variable, by unrolled, KKT-implicit or
//! fixed-point-implicit differentiation. Includes a high-accuracy reference
//! solver and finite-difference oracles, a predict-and-optimize training
//! loop, and a CLI benchmark harness.

pub mod admm;
pub mod cli;
pub mod core;
pub mod diff;
pub mod error;
pub mod ipo;
pub mod oracle;
pub mod serialize;

pub use crate::core::{
    generate_exp1_problem, DualPair, GradientBundle, QpProblem, QpSolution, SolveTrace,
    SolverConfig,
};
pub use crate::error::{QpError, Result};
