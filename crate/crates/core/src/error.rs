use thiserror::Error;

use crate::tree::NodeId;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Structural and input errors raised across the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("branching factor must be at least 2 and horizon at least 1 (got N={branching}, T={horizon})")]
    InvalidDimensions { branching: usize, horizon: usize },
    #[error("transition probability {value} at {node}, branch {branch} is not strictly positive")]
    NonPositiveProbability { node: NodeId, branch: usize, value: f64 },
    #[error("transition row at {node} sums to {sum}, expected 1")]
    RowSumMismatch { node: NodeId, sum: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} is a leaf; the operation needs a non-leaf node")]
    LeafNode(NodeId),
    #[error("process has no values at time {time}")]
    MissingValue { time: usize },
    #[error("branch {branch} out of range 1..={branching}")]
    BranchOutOfRange { branch: usize, branching: usize },
    #[error("generator returned a non-finite value at {node}")]
    GeneratorEvaluation { node: NodeId },
    #[error("assumption violated: {condition} at {node}")]
    AssumptionViolation { condition: &'static str, node: NodeId },
    #[error("non-finite input: {0}")]
    NonFiniteInput(String),
    #[error("Gamma is singular at {} node(s), first at {}", .nodes.len(), .nodes.first().map(|n| n.to_string()).unwrap_or_default())]
    SingularCertificate { nodes: Vec<NodeId> },
    #[error("continuation parameter {0} outside [0, 1]")]
    AlphaOutOfRange(f64),
}
