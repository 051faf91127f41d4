//! Brute-force reference solvers that share no code path with the recursive
//! solvers: a global dense system for the linear equation and a global Newton
//! iteration on the forward values for the nonlinear one.

mod global_linear;
mod newton;

pub use global_linear::{linear_oracle, LinearVerdict, RANK_THRESHOLD};
pub use newton::{
    fd_jacobian, forward_defect, solve_oracle, NewtonOptions, OracleFailure, OracleSolve, StartReport,
};
