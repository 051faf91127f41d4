//! Problem files: JSON schema, validation and binding to solver inputs.

use std::path::Path;
use std::sync::Arc;

use fbsde_core::linalg::Matrix;
use fbsde_core::linear::{LinearCoefficients, SpecialInputs};
use fbsde_core::nonlinear::NonlinearProblem;
use fbsde_core::tree::{AdaptedProcess, ScenarioTree};
use fbsde_core::{Coefficients, NodeId, Problem, TransitionSpec, Tree};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::expr::{parse_expression, Env, ExprError, Expression, Var};

#[derive(Debug, thiserror::Error)]
pub enum LoadError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid problem file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("schema error at `{path}`: {message}")]
    Schema { path: String, message: String },
    #[error("cannot parse `{field}`: {source}")]
    Parse { field: String, source: ExprError },
    #[error("assumption violated: {condition} at node {node}")]
    AssumptionViolation { condition: &'static str, node: String },
    #[error(transparent)]
    Invalid(fbsde_core::Error),
}

fn schema(path: impl Into<String>, message: impl Into<String>) -> LoadError {
    LoadError::Schema { path: path.into(), message: message.into() }
}

impl From<fbsde_core::Error> for LoadError {
    fn from(e: fbsde_core::Error) -> Self {
        LoadError::Invalid(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Bsde,
    Linear,
    Special,
    Nonlinear,
}

impl Kind {
    pub fn name(self) -> &'static str {
        match self {
            Kind::Bsde => "bsde",
            Kind::Linear => "linear",
            Kind::Special => "special",
            Kind::Nonlinear => "nonlinear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeName {
    Continuation,
    Picard,
}

/// Solver options stored in the file; command-line flags take precedence.
#[derive(Debug, Clone, Copy, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileOptions {
    pub tolerance: Option<f64>,
    pub delta: Option<f64>,
    pub max_iter: Option<usize>,
    pub mode: Option<ModeName>,
    pub seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTree {
    #[serde(rename = "N")]
    branching: usize,
    #[serde(rename = "T")]
    horizon: usize,
    #[serde(default)]
    transition: Option<Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    kind: Kind,
    tree: RawTree,
    x0: Option<f64>,
    #[serde(default)]
    coefficients: Map<String, Value>,
    terminal: Option<Vec<f64>>,
    #[serde(default)]
    options: FileOptions,
}

/// Coefficients bound to solver inputs.
#[derive(Debug, Clone)]
pub enum Bound {
    /// Terminal value per leaf and a generator over `(t, y, z, w)`.
    Bsde { terminal: Vec<f64>, generator: Arc<Expression> },
    Linear(Box<Coefficients>),
    Special(Box<SpecialInputs<f64>>),
    Nonlinear(Problem),
}

#[derive(Debug, Clone)]
pub struct LoadedProblem {
    pub kind: Kind,
    pub tree: Tree,
    /// Zero for the `bsde` kind.
    pub x0: f64,
    pub bound: Bound,
    pub options: FileOptions,
}

/// `1.2.1` style label of a node, `root` for the root.
pub fn node_label(node: NodeId, branching: usize) -> String {
    if node.depth == 0 {
        return "root".into();
    }
    node.path(branching).iter().map(|b| b.to_string()).collect::<Vec<_>>().join(".")
}

/// Last branch taken, 1-based; 0 at the root.
pub fn branch_variable(node: NodeId, branching: usize) -> f64 {
    node.last_branch(branching).map_or(0.0, |b| (b + 1) as f64)
}

pub fn load_problem(path: &Path) -> Result<LoadedProblem, LoadError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| LoadError::Io { path: path.display().to_string(), source })?;
    load_problem_str(&text)
}

pub fn load_problem_str(text: &str) -> Result<LoadedProblem, LoadError> {
    let raw: RawFile = serde_json::from_str(text)?;
    let tree = build_tree(&raw.tree)?;
    let needs_x0 = raw.kind != Kind::Bsde;
    let x0 = match (raw.x0, needs_x0) {
        (Some(v), true) if v.is_finite() => v,
        (Some(_), true) => return Err(schema("x0", "must be finite")),
        (None, true) => return Err(schema("x0", "required for this kind")),
        (Some(_), false) => return Err(schema("x0", "not used by bsde problems")),
        (None, false) => 0.0,
    };
    if raw.terminal.is_some() && raw.kind != Kind::Bsde {
        return Err(schema("terminal", "only bsde problems take a terminal array; use coefficients"));
    }
    let fields = Fields { tree: &tree, map: &raw.coefficients };
    let bound = match raw.kind {
        Kind::Bsde => bind_bsde(&fields, raw.terminal)?,
        Kind::Linear => Bound::Linear(Box::new(bind_linear(&fields)?)),
        Kind::Special => Bound::Special(Box::new(bind_special(&fields)?)),
        Kind::Nonlinear => Bound::Nonlinear(bind_nonlinear(&fields)?),
    };
    Ok(LoadedProblem { kind: raw.kind, tree, x0, bound, options: raw.options })
}

fn build_tree(raw: &RawTree) -> Result<Tree, LoadError> {
    let spec = match &raw.transition {
        None => TransitionSpec::Uniform,
        Some(Value::String(s)) if s == "uniform" => TransitionSpec::Uniform,
        Some(Value::Array(items)) => {
            let mut rows = Vec::new();
            for (i, item) in items.iter().enumerate() {
                // a level of rows or a single row
                match item {
                    Value::Array(inner) if inner.first().is_some_and(Value::is_array) => {
                        for (j, row) in inner.iter().enumerate() {
                            rows.push(number_row(row, &format!("tree.transition[{i}][{j}]"))?);
                        }
                    }
                    row => rows.push(number_row(row, &format!("tree.transition[{i}]"))?),
                }
            }
            TransitionSpec::Table(rows)
        }
        Some(_) => return Err(schema("tree.transition", "expected \"uniform\" or an array of rows")),
    };
    Ok(ScenarioTree::new(raw.branching, raw.horizon, spec)?)
}

fn number_row(v: &Value, path: &str) -> Result<Vec<f64>, LoadError> {
    let items = v.as_array().ok_or_else(|| schema(path, "expected an array of numbers"))?;
    items.iter().map(|x| x.as_f64().ok_or_else(|| schema(path, "expected a number"))).collect()
}

/// Variables visible to time-and-node coefficients.
const NODE_VARS: &[Var] = &[Var::T, Var::W];
/// Variables visible to nonlinear coefficient functions.
const STATE_VARS: &[Var] = &[Var::T, Var::X, Var::Y, Var::Z(0), Var::W];

struct Fields<'a> {
    tree: &'a Tree,
    map: &'a Map<String, Value>,
}

impl Fields<'_> {
    fn check_names(&self, allowed: &[&str]) -> Result<(), LoadError> {
        match self.map.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(k) => Err(schema(format!("coefficients.{k}"), format!("unknown coefficient; expected one of {}", allowed.join(", ")))),
            None => Ok(()),
        }
    }

    fn n(&self) -> usize {
        self.tree.branching()
    }

    fn expression(&self, path: &str, src: &str, vars: &[Var]) -> Result<Expression, LoadError> {
        let e = parse_expression(src).map_err(|source| LoadError::Parse { field: path.to_string(), source })?;
        e.restrict(vars, self.n() - 1).map_err(|source| LoadError::Parse { field: path.to_string(), source })?;
        Ok(e)
    }

    /// A number, or an expression in `t` and `w` evaluated at `node`.
    fn cell(&self, path: &str, v: &Value, node: NodeId) -> Result<f64, LoadError> {
        match v {
            Value::Number(x) => x.as_f64().ok_or_else(|| schema(path, "number out of range")),
            Value::String(src) => {
                let e = self.expression(path, src, NODE_VARS)?;
                let env = Env { t: node.depth as f64, w: branch_variable(node, self.n()), ..Env::default() };
                e.eval(&env).map_err(|source| LoadError::Parse { field: path.to_string(), source })
            }
            _ => Err(schema(path, "expected a number or an expression string")),
        }
    }

    fn per_node<'v>(&self, path: &str, items: &'v [Value], start: usize, end: usize) -> Result<&'v [Value], LoadError> {
        let want = self.tree.node_count(start, end);
        if items.len() != want {
            return Err(schema(path, format!("expected {want} per-node entries for times {start}..={end}, got {}", items.len())));
        }
        Ok(items)
    }

    fn scalar(&self, name: &str, start: usize, end: usize) -> Result<AdaptedProcess<f64>, LoadError> {
        let path = format!("coefficients.{name}");
        let tree = self.tree;
        match self.map.get(name) {
            None => Ok(AdaptedProcess::from_fn(tree, start, end, |_| 0.0)),
            Some(Value::Array(items)) => {
                let items = self.per_node(&path, items, start, end)?;
                let mut it = items.iter().enumerate();
                AdaptedProcess::try_from_fn(tree, start, end, |node| {
                    let (k, v) = it.next().expect("count checked");
                    self.cell(&format!("{path}[{k}]"), v, node)
                })
            }
            Some(v) => AdaptedProcess::try_from_fn(tree, start, end, |node| self.cell(&path, v, node)),
        }
    }

    fn row_cells(&self, path: &str, v: &Value, node: NodeId) -> Result<Vec<f64>, LoadError> {
        let n = self.n();
        match v {
            Value::Array(items) if items.len() == n => {
                items.iter().enumerate().map(|(j, c)| self.cell(&format!("{path}[{j}]"), c, node)).collect()
            }
            Value::Array(items) => Err(schema(path, format!("expected a row of {n} entries, got {}", items.len()))),
            other => Ok(vec![self.cell(path, other, node)?; n]),
        }
    }

    /// A constant row, one row per node, or a scalar broadcast to every entry.
    fn row(&self, name: &str, start: usize, end: usize) -> Result<AdaptedProcess<Vec<f64>>, LoadError> {
        let path = format!("coefficients.{name}");
        let tree = self.tree;
        let n = self.n();
        match self.map.get(name) {
            None => Ok(AdaptedProcess::from_fn(tree, start, end, |_| vec![0.0; n])),
            Some(Value::Array(items)) if items.first().is_some_and(Value::is_array) => {
                let items = self.per_node(&path, items, start, end)?;
                let mut it = items.iter().enumerate();
                AdaptedProcess::try_from_fn(tree, start, end, |node| {
                    let (k, v) = it.next().expect("count checked");
                    self.row_cells(&format!("{path}[{k}]"), v, node)
                })
            }
            Some(v) => AdaptedProcess::try_from_fn(tree, start, end, |node| self.row_cells(&path, v, node)),
        }
    }

    fn matrix_cells(&self, path: &str, v: &Value, node: NodeId) -> Result<Matrix<f64>, LoadError> {
        let n = self.n();
        let rows = v.as_array().filter(|r| r.len() == n).ok_or_else(|| schema(path, format!("expected {n} rows")))?;
        let rows: Vec<Vec<f64>> = rows
            .iter()
            .enumerate()
            .map(|(i, r)| match r {
                Value::Array(_) => self.row_cells(&format!("{path}[{i}]"), r, node),
                _ => Err(schema(format!("{path}[{i}]"), format!("expected a row of {n} entries"))),
            })
            .collect::<Result<_, _>>()?;
        Ok(Matrix::from_rows(&rows))
    }

    /// An `N × N` constant or one matrix per node.
    fn matrix(&self, name: &str, start: usize, end: usize) -> Result<AdaptedProcess<Matrix<f64>>, LoadError> {
        let path = format!("coefficients.{name}");
        let tree = self.tree;
        let n = self.n();
        let depth = |v: &Value| {
            let mut d = 0;
            let mut cur = v;
            while let Some(first) = cur.as_array().and_then(|a| a.first()) {
                d += 1;
                cur = first;
            }
            d
        };
        match self.map.get(name) {
            None => Ok(AdaptedProcess::from_fn(tree, start, end, |_| Matrix::zeros(n, n))),
            Some(v @ Value::Array(items)) if depth(v) == 3 => {
                let items = self.per_node(&path, items, start, end)?;
                let mut it = items.iter().enumerate();
                AdaptedProcess::try_from_fn(tree, start, end, |node| {
                    let (k, v) = it.next().expect("count checked");
                    self.matrix_cells(&format!("{path}[{k}]"), v, node)
                })
            }
            Some(v) => AdaptedProcess::try_from_fn(tree, start, end, |node| self.matrix_cells(&path, v, node)),
        }
    }

    fn state_expression(&self, name: &str) -> Result<Option<Expression>, LoadError> {
        let path = format!("coefficients.{name}");
        match self.map.get(name) {
            None => Ok(None),
            Some(Value::String(src)) => Ok(Some(self.expression(&path, src, STATE_VARS)?)),
            Some(Value::Number(x)) => Ok(Some(Expression::constant(x.as_f64().unwrap_or(f64::NAN)))),
            Some(_) => Err(schema(path, "expected an expression string or a number")),
        }
    }

    fn constant(&self, name: &str) -> Result<Option<f64>, LoadError> {
        match self.map.get(name) {
            None => Ok(None),
            Some(v) => v.as_f64().filter(|x| x.is_finite()).map(Some).ok_or_else(|| schema(format!("coefficients.{name}"), "expected a number")),
        }
    }
}

fn assumption(e: fbsde_core::Error, tree: &Tree) -> LoadError {
    match e {
        fbsde_core::Error::AssumptionViolation { condition, node } => {
            LoadError::AssumptionViolation { condition, node: node_label(node, tree.branching()) }
        }
        other => LoadError::Invalid(other),
    }
}

fn bind_linear(f: &Fields<'_>) -> Result<Coefficients, LoadError> {
    f.check_names(&[
        "A", "B", "C", "D", "A_bar", "B_bar", "C_bar", "D_bar", "A_hat", "B_hat", "C_hat", "D_hat", "G", "g",
    ])?;
    let h = f.tree.horizon();
    let c = LinearCoefficients {
        drift_x: f.scalar("A", 0, h - 1)?,
        drift_y: f.scalar("B", 0, h - 1)?,
        drift_z: f.row("C", 0, h - 1)?,
        drift_const: f.scalar("D", 0, h - 1)?,
        vol_x: f.row("A_bar", 0, h - 1)?,
        vol_y: f.row("B_bar", 0, h - 1)?,
        vol_z: f.matrix("C_bar", 0, h - 1)?,
        vol_const: f.row("D_bar", 0, h - 1)?,
        gen_x: f.scalar("A_hat", 1, h)?,
        gen_y: f.scalar("B_hat", 1, h)?,
        gen_z: f.row("C_hat", 1, h)?,
        gen_const: f.scalar("D_hat", 1, h)?,
        terminal_slope: f.scalar("G", h, h)?,
        terminal_offset: f.scalar("g", h, h)?,
    };
    c.validate(f.tree).map_err(|e| assumption(e, f.tree))?;
    Ok(c)
}

fn bind_special(f: &Fields<'_>) -> Result<SpecialInputs<f64>, LoadError> {
    f.check_names(&["D", "D_bar", "D_hat", "g"])?;
    let h = f.tree.horizon();
    let inputs = SpecialInputs {
        drift_const: f.scalar("D", 0, h - 1)?,
        vol_const: f.row("D_bar", 0, h - 1)?,
        gen_const: f.scalar("D_hat", 1, h)?,
        terminal_offset: f.scalar("g", h, h)?,
    };
    // finiteness and shapes through the generic validator
    let mut full = fbsde_core::linear::special_coefficients(f.tree);
    full.drift_const = inputs.drift_const.clone();
    full.vol_const = inputs.vol_const.clone();
    full.gen_const = inputs.gen_const.clone();
    full.terminal_offset = inputs.terminal_offset.clone();
    full.validate(f.tree).map_err(|e| assumption(e, f.tree))?;
    Ok(inputs)
}

fn bind_bsde(f: &Fields<'_>, terminal: Option<Vec<f64>>) -> Result<Bound, LoadError> {
    f.check_names(&["f"])?;
    let leaves = f.tree.level_size(f.tree.horizon());
    let terminal = terminal.ok_or_else(|| schema("terminal", "required for bsde problems"))?;
    if terminal.len() != leaves {
        return Err(schema("terminal", format!("expected {leaves} leaf values, got {}", terminal.len())));
    }
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(schema("terminal", "values must be finite"));
    }
    let generator = match f.map.get("f") {
        None => Expression::constant(0.0),
        Some(Value::String(src)) => f.expression("coefficients.f", src, &[Var::T, Var::Y, Var::Z(0), Var::W])?,
        Some(Value::Number(x)) => Expression::constant(x.as_f64().unwrap_or(f64::NAN)),
        Some(_) => return Err(schema("coefficients.f", "expected an expression string or a number")),
    };
    Ok(Bound::Bsde { terminal, generator: Arc::new(generator) })
}

fn bind_nonlinear(f: &Fields<'_>) -> Result<Problem, LoadError> {
    f.check_names(&["b", "sigma", "f", "h", "c1", "c2"])?;
    let n = f.n();
    let horizon = f.tree.horizon() as f64;
    let required = |name: &str| f.state_expression(name)?.ok_or_else(|| schema(format!("coefficients.{name}"), "required"));
    let drift = Arc::new(required("b")?);
    let generator = Arc::new(required("f")?);
    let terminal = Arc::new(required("h")?);
    let vol: Vec<Expression> = match f.map.get("sigma") {
        Some(Value::Array(items)) if items.len() == n => items
            .iter()
            .enumerate()
            .map(|(j, v)| {
                let path = format!("coefficients.sigma[{j}]");
                match v {
                    Value::String(src) => f.expression(&path, src, STATE_VARS),
                    Value::Number(x) => Ok(Expression::constant(x.as_f64().unwrap_or(f64::NAN))),
                    _ => Err(schema(path, "expected an expression string or a number")),
                }
            })
            .collect::<Result<_, _>>()?,
        Some(_) => return Err(schema("coefficients.sigma", format!("expected an array of {n} expressions"))),
        None => return Err(schema("coefficients.sigma", "required")),
    };
    let vol = Arc::new(vol);
    let lipschitz = f.constant("c1")?;
    let monotonicity = f.constant("c2")?;

    let (g1, g2) = (generator.clone(), generator);
    Ok(NonlinearProblem::new(
        move |t, node, x, y, z| drift.eval_or_nan(&Env { t: t as f64, x, y, z, w: branch_variable(node, n) }),
        move |t, node, x, y, z| {
            let w = branch_variable(node, n);
            vol.iter().map(|e| e.eval_or_nan(&Env { t: t as f64, x, y, z, w })).collect()
        },
        move |t, node, x, y, z| g1.eval_or_nan(&Env { t: t as f64, x, y, z, w: branch_variable(node, n) }),
        move |node, x, y| g2.eval_or_nan(&Env { t: horizon, x, y, z: &[], w: branch_variable(node, n) }),
        move |node, x| terminal.eval_or_nan(&Env { t: horizon, x, y: 0.0, z: &[], w: branch_variable(node, n) }),
    )
    .with_constants(lipschitz, monotonicity))
}
