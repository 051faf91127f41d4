//! Forward-backward stochastic difference equations on finite scenario trees.
//!
//! The driving process takes one of `N` states per period, so every
//! expectation is a finite weighted sum over the children of a node. The crate
//! provides the tree and martingale calculus, an exact backward solver, a
//! linear solver with a per-node solvability certificate, a continuation
//! solver for monotone nonlinear equations, and brute-force oracles.
//!
//! Everything is generic over [`Scalar`]; the aliases at the root fix `f64`.

pub mod bsde;
pub mod error;
pub mod linalg;
pub mod linear;
pub mod martingale;
pub mod nonlinear;
pub mod oracle;
pub mod sample;
pub mod scalar;
pub mod solution;
pub mod tree;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tree::{NodeId, TransitionSpec};

pub type Tree = tree::ScenarioTree<f64>;
pub type Process<V = f64> = tree::AdaptedProcess<V>;
pub type Row = martingale::ZRow<f64>;
pub type Solution = solution::FbsdeSolution<f64>;
pub type Coefficients = linear::LinearCoefficients<f64>;
pub type Problem = nonlinear::NonlinearProblem<f64>;
