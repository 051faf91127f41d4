//! Machine-readable solver reports, JSON and CSV.

use std::fmt::Write as _;

use fbsde_core::martingale::{norm_constants, ZRow};
use fbsde_core::solution::{FbsdeSolution, Residuals};
use fbsde_core::tree::AdaptedProcess;
use fbsde_core::{NodeId, Solution, Tree};
use serde::{Deserialize, Serialize};

use crate::problem::node_label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Solved,
    Unsolvable,
    NoConvergence,
    Checked,
    AssumptionViolated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub t: usize,
    pub path: String,
    #[serde(rename = "X", skip_serializing_if = "Option::is_none", default)]
    pub x: Option<f64>,
    #[serde(rename = "Y")]
    pub y: f64,
    /// Canonical row (last entry zero); absent at the leaves.
    #[serde(rename = "Z_canonical", skip_serializing_if = "Option::is_none", default)]
    pub z: Option<Vec<f64>>,
    #[serde(rename = "Z_tilde", skip_serializing_if = "Option::is_none", default)]
    pub z_tilde: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub forward: f64,
    pub backward: f64,
}

impl From<Residuals<f64>> for ResidualReport {
    fn from(r: Residuals<f64>) -> Self {
        Self { forward: r.forward, backward: r.backward }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub delta: f64,
    pub levels: usize,
    pub iterations: usize,
    pub halvings: usize,
    pub inner_solves: usize,
    pub contraction_witnessed: usize,
    pub contraction_broken: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Constants {
    #[serde(rename = "L_lower")]
    pub lower: f64,
    #[serde(rename = "L_upper")]
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    /// `singular_gamma`, `no_solution` or `infinitely_many`.
    pub kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nodes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unknowns: Option<usize>,
}

/// Decoupling field `Y = P X + p`, one list per time `start..=T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiccatiReport {
    pub start: usize,
    #[serde(rename = "P")]
    pub slope: Vec<Vec<f64>>,
    #[serde(rename = "p")]
    pub offset: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub samples: usize,
    pub lipschitz: f64,
    pub monotone_interior: Option<f64>,
    pub monotone_initial: f64,
    pub monotone_terminal: f64,
    pub terminal_increasing: f64,
    pub satisfied: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub violated_clause: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness_node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub witness_ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub converged: bool,
    pub iterations: usize,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub starts: Vec<StartSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub start_spread: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub kind: String,
    pub status: Status,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub certificate: Option<Certificate>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub solution: Vec<NodeRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<ResidualReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stats: Option<StatsReport>,
    pub constants: Constants,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub riccati: Option<RiccatiReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<DiagnosticsReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleReport>,
}

impl Report {
    pub fn new(kind: &str, status: Status, tree: &Tree) -> Self {
        let c = norm_constants(tree);
        Self {
            kind: kind.to_string(),
            status,
            message: None,
            certificate: None,
            solution: Vec::new(),
            residuals: None,
            stats: None,
            constants: Constants { lower: c.lower, upper: c.upper },
            riccati: None,
            diagnostics: None,
            oracle: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// One row per node: `t,path,X,Y,Z_1..Z_N`; empty cells where a value does not exist.
    pub fn to_csv(&self, branching: usize) -> String {
        let mut out = String::from("t,path,X,Y");
        for j in 1..=branching {
            let _ = write!(out, ",Z_{j}");
        }
        out.push('\n');
        for r in &self.solution {
            let _ = write!(out, "{},{},", r.t, r.path);
            if let Some(x) = r.x {
                let _ = write!(out, "{x:?}");
            }
            let _ = write!(out, ",{:?}", r.y);
            for j in 0..branching {
                out.push(',');
                if let Some(z) = &r.z {
                    let _ = write!(out, "{:?}", z[j]);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Node records of a full solution, level by level.
pub fn records(tree: &Tree, solution: &Solution) -> Vec<NodeRecord> {
    records_of(tree, Some(&solution.x), &solution.y, &solution.z)
}

pub fn records_of(
    tree: &Tree,
    x: Option<&AdaptedProcess<f64>>,
    y: &AdaptedProcess<f64>,
    z: &AdaptedProcess<ZRow<f64>>,
) -> Vec<NodeRecord> {
    let n = tree.branching();
    (0..=tree.horizon())
        .flat_map(|t| tree.nodes(t))
        .map(|node| {
            let row = z.get(node).map(|r| r.canonicalize());
            NodeRecord {
                t: node.depth,
                path: node_label(node, n),
                x: x.and_then(|x| x.get(node).copied()),
                y: *y.get(node).expect("Y on every node"),
                z_tilde: row.as_ref().map(|r| r.tilde_contract()),
                z: row.map(|r| r.0),
            }
        })
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum RebuildError {
    #[error("report has {found} node records, the tree has {expected}")]
    Count { expected: usize, found: usize },
    #[error("record {index} is `{found}`, expected `{expected}`")]
    Order { index: usize, expected: String, found: String },
    #[error("record `{0}` lacks a value the solution needs")]
    Missing(String),
}

/// Solution carried by a report, checked against the node order of `tree`.
pub fn rebuild_solution(tree: &Tree, report: &Report) -> Result<Solution, RebuildError> {
    let h = tree.horizon();
    let n = tree.branching();
    let expected = tree.node_count(0, h);
    if report.solution.len() != expected {
        return Err(RebuildError::Count { expected, found: report.solution.len() });
    }
    let mut records = report.solution.iter().enumerate();
    let mut take = |node: NodeId| {
        let (index, r) = records.next().expect("count checked");
        let label = node_label(node, n);
        if r.path != label || r.t != node.depth {
            return Err(RebuildError::Order { index, expected: label, found: r.path.clone() });
        }
        Ok(r)
    };
    let all = AdaptedProcess::try_from_fn(tree, 0, h, |node| take(node).cloned())?;
    let x = AdaptedProcess::try_from_fn(tree, 0, h, |node| {
        all.get(node).and_then(|r| r.x).ok_or_else(|| RebuildError::Missing(node_label(node, n)))
    })?;
    let y = all.map(|_, r| r.y);
    let z = AdaptedProcess::try_from_fn(tree, 0, h - 1, |node| {
        all.get(node)
            .and_then(|r| r.z.clone())
            .filter(|z| z.len() == n)
            .map(ZRow)
            .ok_or_else(|| RebuildError::Missing(node_label(node, n)))
    })?;
    let residuals = report.residuals.map_or(Residuals { forward: f64::NAN, backward: f64::NAN }, |r| Residuals {
        forward: r.forward,
        backward: r.backward,
    });
    Ok(FbsdeSolution { x, y, z, residuals })
}
