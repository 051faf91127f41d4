//! The finite-state driving process as an N-ary scenario tree.
//!
//! A node at depth `t` is an atom of the time-`t` filtration. Child `i` of a
//! node is the event that the driving process moves to the `i`-th basis
//! vector at `t + 1`. Nodes of each level are stored contiguously in
//! lexicographic path order, so the children of node `k` at depth `t` are
//! `k * N .. (k + 1) * N` at depth `t + 1`.
//!
//! Branch indices in this API are 0-based; [`NodeId::path`] reports the
//! conventional 1-based labels.

use std::fmt;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Tolerance on transition row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub depth: usize,
    /// Position within the level, lexicographic in the path.
    pub index: usize,
}

impl NodeId {
    pub const ROOT: NodeId = NodeId { depth: 0, index: 0 };

    pub fn new(depth: usize, index: usize) -> Self {
        Self { depth, index }
    }

    /// Branch labels from the root, 1-based.
    pub fn path(&self, branching: usize) -> Vec<usize> {
        let mut path = vec![0; self.depth];
        let mut k = self.index;
        for slot in path.iter_mut().rev() {
            *slot = k % branching + 1;
            k /= branching;
        }
        path
    }

    /// Inverse of [`NodeId::path`].
    pub fn from_path(path: &[usize], branching: usize) -> Result<Self> {
        let mut index = 0;
        for &b in path {
            if b == 0 || b > branching {
                return Err(Error::BranchOutOfRange { branch: b, branching });
            }
            index = index * branching + (b - 1);
        }
        Ok(Self { depth: path.len(), index })
    }

    /// 0-based branch taken from the parent, `None` at the root.
    pub fn last_branch(&self, branching: usize) -> Option<usize> {
        (self.depth > 0).then(|| self.index % branching)
    }

    pub fn parent(&self, branching: usize) -> Option<NodeId> {
        (self.depth > 0).then(|| NodeId::new(self.depth - 1, self.index / branching))
    }

    pub fn child(&self, branching: usize, branch: usize) -> NodeId {
        NodeId::new(self.depth + 1, self.index * branching + branch)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "node(t={}, #{})", self.depth, self.index)
    }
}

/// How transition rows are supplied to [`ScenarioTree::new`].
#[derive(Debug, Clone, PartialEq)]
pub enum TransitionSpec<T> {
    Uniform,
    /// One row per non-leaf node, level by level, lexicographic within a level.
    Table(Vec<Vec<T>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree<T> {
    branching: usize,
    horizon: usize,
    // transition rows of non-leaf nodes, flattened level by level
    rows: Vec<Vec<T>>,
    level_offsets: Vec<usize>,
    // unconditional probability of every node, per level
    node_probs: Vec<Vec<T>>,
}

impl<T: Scalar> ScenarioTree<T> {
    pub fn new(branching: usize, horizon: usize, spec: TransitionSpec<T>) -> Result<Self> {
        if branching < 2 || horizon < 1 {
            return Err(Error::InvalidDimensions { branching, horizon });
        }
        let level_offsets: Vec<usize> = (0..=horizon)
            .scan(0usize, |acc, t| {
                let here = *acc;
                *acc += branching.pow(t as u32);
                Some(here)
            })
            .collect();
        let interior = level_offsets[horizon];
        let rows = match spec {
            TransitionSpec::Uniform => {
                let p = T::one() / T::from_usize(branching).expect("branching fits");
                vec![vec![p; branching]; interior]
            }
            TransitionSpec::Table(rows) => {
                if rows.len() != interior {
                    return Err(Error::ShapeMismatch(format!(
                        "expected {interior} transition rows for N={branching}, T={horizon}, got {}",
                        rows.len()
                    )));
                }
                rows
            }
        };
        let mut tree = Self { branching, horizon, rows, level_offsets, node_probs: Vec::new() };
        tree.validate()?;
        tree.node_probs = tree.compute_node_probabilities();
        Ok(tree)
    }

    pub fn uniform(branching: usize, horizon: usize) -> Result<Self> {
        Self::new(branching, horizon, TransitionSpec::Uniform)
    }

    fn validate(&self) -> Result<()> {
        let tol = T::tol(ROW_SUM_TOLERANCE);
        for t in 0..self.horizon {
            for node in self.nodes(t) {
                let row = &self.rows[self.level_offsets[t] + node.index];
                if row.len() != self.branching {
                    return Err(Error::ShapeMismatch(format!(
                        "transition row at {node} has {} entries, expected {}",
                        row.len(),
                        self.branching
                    )));
                }
                for (branch, &p) in row.iter().enumerate() {
                    if !(p > T::zero()) || !p.is_finite() {
                        return Err(Error::NonPositiveProbability { node, branch, value: p.as_f64() });
                    }
                }
                let sum = row.iter().fold(T::zero(), |a, &p| a + p);
                if (sum - T::one()).abs() > tol {
                    return Err(Error::RowSumMismatch { node, sum: sum.as_f64() });
                }
            }
        }
        Ok(())
    }

    fn compute_node_probabilities(&self) -> Vec<Vec<T>> {
        let mut levels = vec![vec![T::one()]];
        for t in 0..self.horizon {
            let prev = &levels[t];
            let next: Vec<T> = self
                .nodes(t + 1)
                .map(|child| {
                    let parent = child.parent(self.branching).expect("depth > 0");
                    let branch = child.index % self.branching;
                    prev[parent.index] * self.rows[self.level_offsets[t] + parent.index][branch]
                })
                .collect();
            levels.push(next);
        }
        levels
    }

    pub fn branching(&self) -> usize {
        self.branching
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// Number of nodes at depth `t`, `N^t`.
    pub fn level_size(&self, t: usize) -> usize {
        self.branching.pow(t as u32)
    }

    /// Total node count over depths `from..=to`.
    pub fn node_count(&self, from: usize, to: usize) -> usize {
        (from..=to).map(|t| self.level_size(t)).sum()
    }

    pub fn is_leaf(&self, node: NodeId) -> bool {
        node.depth == self.horizon
    }

    pub fn nodes(&self, t: usize) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.level_size(t)).map(move |k| NodeId::new(t, k))
    }

    pub fn leaves(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes(self.horizon)
    }

    pub fn child(&self, node: NodeId, branch: usize) -> NodeId {
        node.child(self.branching, branch)
    }

    pub fn children(&self, node: NodeId) -> impl Iterator<Item = NodeId> + '_ {
        (0..self.branching).map(move |i| node.child(self.branching, i))
    }

    /// The conditional law of the next state, `(P_t^1, …, P_t^N)`.
    pub fn transition(&self, node: NodeId) -> Result<&[T]> {
        self.check_interior(node)?;
        Ok(&self.rows[self.level_offsets[node.depth] + node.index])
    }

    /// All transition rows, level by level.
    pub fn transition_rows(&self) -> &[Vec<T>] {
        &self.rows
    }

    pub fn node_probability(&self, node: NodeId) -> T {
        self.node_probs[node.depth][node.index]
    }

    pub fn level_probabilities(&self, t: usize) -> &[T] {
        &self.node_probs[t]
    }

    pub(crate) fn check_interior(&self, node: NodeId) -> Result<()> {
        if node.depth > self.horizon || node.index >= self.level_size(node.depth) {
            return Err(Error::ShapeMismatch(format!("{node} is not a node of this tree")));
        }
        if self.is_leaf(node) {
            return Err(Error::LeafNode(node));
        }
        Ok(())
    }

    /// `Σ_i P_t^i · value(i)` at a non-leaf node.
    pub fn cond_exp_by(&self, node: NodeId, mut value: impl FnMut(usize) -> T) -> Result<T> {
        let row = self.transition(node)?;
        Ok(row.iter().enumerate().fold(T::zero(), |acc, (i, &p)| acc + p * value(i)))
    }

    /// Conditional expectation of a process at `node.depth + 1` given the node.
    pub fn cond_exp(&self, process: &AdaptedProcess<T>, node: NodeId) -> Result<T> {
        self.check_interior(node)?;
        let level = process.level(node.depth + 1).ok_or(Error::MissingValue { time: node.depth + 1 })?;
        self.cond_exp_by(node, |i| level[node.index * self.branching + i])
    }

    /// Unconditional expectation of the process at time `t`.
    pub fn expectation(&self, process: &AdaptedProcess<T>, t: usize) -> Result<T> {
        let level = process.level(t).ok_or(Error::MissingValue { time: t })?;
        self.expectation_of(t, |node| level[node.index])
    }

    pub fn expectation_of(&self, t: usize, mut value: impl FnMut(NodeId) -> T) -> Result<T> {
        if t > self.horizon {
            return Err(Error::MissingValue { time: t });
        }
        Ok(self.nodes(t).fold(T::zero(), |acc, node| acc + self.node_probability(node) * value(node)))
    }
}

/// Node-indexed values over a contiguous time range.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess<V> {
    start: usize,
    levels: Vec<Vec<V>>,
}

impl<V> AdaptedProcess<V> {
    /// Wraps per-level values, checking every level has `N^t` entries.
    pub fn new<T: Scalar>(tree: &ScenarioTree<T>, start: usize, levels: Vec<Vec<V>>) -> Result<Self> {
        let end = start + levels.len();
        if levels.is_empty() || end > tree.horizon() + 1 {
            return Err(Error::ShapeMismatch(format!(
                "process range starting at {start} with {} levels does not fit horizon {}",
                levels.len(),
                tree.horizon()
            )));
        }
        for (offset, level) in levels.iter().enumerate() {
            let t = start + offset;
            if level.len() != tree.level_size(t) {
                return Err(Error::ShapeMismatch(format!(
                    "time {t} has {} values, expected {}",
                    level.len(),
                    tree.level_size(t)
                )));
            }
        }
        Ok(Self { start, levels })
    }

    pub fn from_fn<T: Scalar>(tree: &ScenarioTree<T>, start: usize, end: usize, mut f: impl FnMut(NodeId) -> V) -> Self {
        assert!(start <= end && end <= tree.horizon(), "time range {start}..={end} outside the tree");
        let levels = (start..=end).map(|t| tree.nodes(t).map(&mut f).collect()).collect();
        Self { start, levels }
    }

    pub fn try_from_fn<T: Scalar, E>(
        tree: &ScenarioTree<T>,
        start: usize,
        end: usize,
        mut f: impl FnMut(NodeId) -> std::result::Result<V, E>,
    ) -> std::result::Result<Self, E> {
        assert!(start <= end && end <= tree.horizon(), "time range {start}..={end} outside the tree");
        let mut levels = Vec::with_capacity(end - start + 1);
        for t in start..=end {
            levels.push(tree.nodes(t).map(&mut f).collect::<std::result::Result<Vec<_>, E>>()?);
        }
        Ok(Self { start, levels })
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.start + self.levels.len() - 1
    }

    pub fn contains_time(&self, t: usize) -> bool {
        t >= self.start && t <= self.end()
    }

    pub fn level(&self, t: usize) -> Option<&[V]> {
        t.checked_sub(self.start).and_then(|k| self.levels.get(k)).map(Vec::as_slice)
    }

    pub fn level_mut(&mut self, t: usize) -> Option<&mut [V]> {
        t.checked_sub(self.start).and_then(|k| self.levels.get_mut(k)).map(Vec::as_mut_slice)
    }

    pub fn get(&self, node: NodeId) -> Option<&V> {
        self.level(node.depth).and_then(|l| l.get(node.index))
    }

    /// Like [`AdaptedProcess::get`] but reports a missing time as an error.
    pub fn at(&self, node: NodeId) -> Result<&V> {
        self.get(node).ok_or(Error::MissingValue { time: node.depth })
    }

    pub fn get_mut(&mut self, node: NodeId) -> Option<&mut V> {
        self.level_mut(node.depth).and_then(|l| l.get_mut(node.index))
    }

    pub fn levels(&self) -> &[Vec<V>] {
        &self.levels
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &V)> {
        self.levels.iter().enumerate().flat_map(move |(offset, level)| {
            level.iter().enumerate().map(move |(k, v)| (NodeId::new(self.start + offset, k), v))
        })
    }

    pub fn map<W>(&self, mut f: impl FnMut(NodeId, &V) -> W) -> AdaptedProcess<W> {
        let levels = self
            .levels
            .iter()
            .enumerate()
            .map(|(offset, level)| {
                level.iter().enumerate().map(|(k, v)| f(NodeId::new(self.start + offset, k), v)).collect()
            })
            .collect();
        AdaptedProcess { start: self.start, levels }
    }
}

impl<T: Scalar> AdaptedProcess<T> {
    /// `E[Σ_s |X_s|²]` over the process range.
    pub fn mean_square_sum(&self, tree: &ScenarioTree<T>) -> T {
        self.iter().fold(T::zero(), |acc, (node, &v)| acc + tree.node_probability(node) * v * v)
    }

    /// The `𝓜(0,t)` norm `(E[Σ_s |X_s|²])^{1/2}`.
    pub fn norm(&self, tree: &ScenarioTree<T>) -> T {
        self.mean_square_sum(tree).sqrt()
    }
}
