//! Backward stochastic difference equations
//!
//! ```text
//! ΔY_t = −f(t+1, Y_{t+1}, Z_{t+1}) + Z_t M_{t+1},   Y_T = η,
//! ```
//!
//! solved exactly by backward induction: `Y_t` is the conditional expectation
//! of `Y_{t+1} + f(t+1, ·)` and `Z_t` is the martingale representation of its
//! deviation. Generators receive only the `Ĩ`-contraction of `Z`, so they
//! cannot tell `∼_M`-equivalent rows apart. The generator at `T` takes no `Z`.

use crate::error::{Error, Result};
use crate::martingale::ZRow;
use crate::scalar::Scalar;
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree};

/// Generator for `t < T`: `(t, node, y, z̃) -> K-vector`, with `z̃` given as
/// `K` rows of length `N − 1`.
pub type Generator<'a, T> = Box<dyn Fn(usize, NodeId, &[T], &[Vec<T>]) -> Vec<T> + 'a>;
/// Generator at the terminal time: `(leaf, y) -> K-vector`.
pub type TerminalGenerator<'a, T> = Box<dyn Fn(NodeId, &[T]) -> Vec<T> + 'a>;

pub struct BsdeProblem<'a, T> {
    dimension: usize,
    terminal: Vec<Vec<T>>,
    generator: Generator<'a, T>,
    terminal_generator: TerminalGenerator<'a, T>,
}

impl<'a, T: Scalar> BsdeProblem<'a, T> {
    /// `terminal` holds one `K`-vector per leaf, in leaf order.
    pub fn new(
        dimension: usize,
        terminal: Vec<Vec<T>>,
        generator: impl Fn(usize, NodeId, &[T], &[Vec<T>]) -> Vec<T> + 'a,
        terminal_generator: impl Fn(NodeId, &[T]) -> Vec<T> + 'a,
    ) -> Self {
        Self { dimension, terminal, generator: Box::new(generator), terminal_generator: Box::new(terminal_generator) }
    }

    /// Scalar (`K = 1`) problem from leaf values and scalar generators.
    pub fn scalar(
        terminal: Vec<T>,
        generator: impl Fn(usize, NodeId, T, &[T]) -> T + 'a,
        terminal_generator: impl Fn(NodeId, T) -> T + 'a,
    ) -> Self {
        Self::new(
            1,
            terminal.into_iter().map(|v| vec![v]).collect(),
            move |t, node, y, z| vec![generator(t, node, y[0], &z[0])],
            move |node, y| vec![terminal_generator(node, y[0])],
        )
    }

    /// `f ≡ 0`: `Y` is the martingale closing `η`.
    pub fn zero_generator(dimension: usize, terminal: Vec<Vec<T>>) -> Self {
        Self::new(dimension, terminal, move |_, _, _, _| vec![T::zero(); dimension], move |_, _| vec![T::zero(); dimension])
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn terminal(&self) -> &[Vec<T>] {
        &self.terminal
    }

    fn drive(&self, tree: &ScenarioTree<T>, node: NodeId, y: &[T], z: Option<&[ZRow<T>]>) -> Result<Vec<T>> {
        let out = if tree.is_leaf(node) {
            (self.terminal_generator)(node, y)
        } else {
            let z = z.ok_or(Error::MissingValue { time: node.depth })?;
            let tilde: Vec<Vec<T>> = z.iter().map(ZRow::tilde_contract).collect();
            (self.generator)(node.depth, node, y, &tilde)
        };
        if out.len() != self.dimension {
            return Err(Error::ShapeMismatch(format!("generator returned {} components, expected {}", out.len(), self.dimension)));
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::GeneratorEvaluation { node });
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution<T> {
    /// `K`-vectors over `[0, T]`.
    pub y: AdaptedProcess<Vec<T>>,
    /// `K` canonical rows per node over `[0, T − 1]`.
    pub z: AdaptedProcess<Vec<ZRow<T>>>,
}

impl<T: Scalar> BsdeSolution<T> {
    /// First component of `Y` as a scalar process.
    pub fn scalar_y(&self) -> AdaptedProcess<T> {
        self.y.map(|_, v| v[0])
    }

    /// First row of `Z` as a process of rows.
    pub fn scalar_z(&self) -> AdaptedProcess<ZRow<T>> {
        self.z.map(|_, v| v[0].clone())
    }
}

pub fn solve_bsde<T: Scalar>(tree: &ScenarioTree<T>, problem: &BsdeProblem<'_, T>) -> Result<BsdeSolution<T>> {
    let horizon = tree.horizon();
    let k_dim = problem.dimension;
    let n = tree.branching();
    if problem.terminal.len() != tree.level_size(horizon) || problem.terminal.iter().any(|v| v.len() != k_dim) {
        return Err(Error::ShapeMismatch(format!(
            "terminal condition needs {} leaf vectors of dimension {k_dim}",
            tree.level_size(horizon)
        )));
    }

    let mut y_levels: Vec<Vec<Vec<T>>> = vec![Vec::new(); horizon + 1];
    let mut z_levels: Vec<Vec<Vec<ZRow<T>>>> = vec![Vec::new(); horizon];
    y_levels[horizon] = problem.terminal.clone();

    for t in (0..horizon).rev() {
        // Y_{t+1} + f(t+1, Y_{t+1}, Z_{t+1}) at every node of level t+1
        let mut shifted = Vec::with_capacity(tree.level_size(t + 1));
        for child in tree.nodes(t + 1) {
            let y = &y_levels[t + 1][child.index];
            let z = z_levels.get(t + 1).map(|level| level[child.index].as_slice());
            let f = problem.drive(tree, child, y, z)?;
            shifted.push(y.iter().zip(&f).map(|(&a, &b)| a + b).collect::<Vec<T>>());
        }
        let mut y_level = Vec::with_capacity(tree.level_size(t));
        let mut z_level = Vec::with_capacity(tree.level_size(t));
        for node in tree.nodes(t) {
            let kids = &shifted[node.index * n..(node.index + 1) * n];
            let mut y = Vec::with_capacity(k_dim);
            let mut z = Vec::with_capacity(k_dim);
            for k in 0..k_dim {
                y.push(tree.cond_exp_by(node, |i| kids[i][k])?);
                let row: Vec<T> = kids.iter().map(|v| v[k]).collect();
                z.push(crate::martingale::represent(tree, node, &row)?.canonicalize());
            }
            y_level.push(y);
            z_level.push(z);
        }
        y_levels[t] = y_level;
        z_levels[t] = z_level;
    }

    Ok(BsdeSolution { y: AdaptedProcess::new(tree, 0, y_levels)?, z: AdaptedProcess::new(tree, 0, z_levels)? })
}

/// Max over non-leaf nodes, branches and components of
/// `|Y_{t+1} − Y_t + f(t+1, ·) − Z_t(e_i − P_t)|`, plus the terminal mismatch.
pub fn bsde_residual<T: Scalar>(tree: &ScenarioTree<T>, problem: &BsdeProblem<'_, T>, solution: &BsdeSolution<T>) -> Result<T> {
    let horizon = tree.horizon();
    let n = tree.branching();
    if solution.y.start() != 0 || solution.y.end() != horizon || solution.z.start() != 0 || solution.z.end() + 1 != horizon {
        return Err(Error::ShapeMismatch("solution must cover Y on [0,T] and Z on [0,T-1]".into()));
    }
    let mut worst = T::zero();
    for (leaf, eta) in tree.leaves().zip(&problem.terminal) {
        let y = solution.y.at(leaf)?;
        for (a, b) in y.iter().zip(eta) {
            worst = worst.max((*a - *b).abs());
        }
    }
    for t in 0..horizon {
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let y = solution.y.at(node)?;
            let z = solution.z.at(node)?;
            if y.len() != problem.dimension || z.len() != problem.dimension || z.iter().any(|r| r.len() != n) {
                return Err(Error::ShapeMismatch(format!("solution shape at {node}")));
            }
            for i in 0..n {
                let child = tree.child(node, i);
                let y_next = solution.y.at(child)?;
                let f = problem.drive(tree, child, y_next, solution.z.get(child).map(Vec::as_slice))?;
                for k in 0..problem.dimension {
                    let r = y_next[k] - y[k] + f[k] - z[k].apply_increment(probs, i);
                    worst = worst.max(r.abs());
                }
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_hand_computation() {
        let tree = ScenarioTree::<f64>::uniform(2, 1).unwrap();
        let problem = BsdeProblem::zero_generator(1, vec![vec![3.0], vec![1.0]]);
        let sol = solve_bsde(&tree, &problem).unwrap();
        assert_eq!(sol.y.at(NodeId::ROOT).unwrap(), &vec![2.0]);
        assert_eq!(sol.z.at(NodeId::ROOT).unwrap(), &vec![ZRow(vec![2.0, 0.0])]);
        assert_eq!(bsde_residual(&tree, &problem, &sol).unwrap(), 0.0);
    }

    #[test]
    fn constant_generator_unrolls() {
        let tree = ScenarioTree::<f64>::uniform(3, 3).unwrap();
        let eta: Vec<f64> = (0..27).map(|k| (k as f64).sin()).collect();
        let c = 0.7;
        let problem = BsdeProblem::scalar(eta.clone(), move |_, _, _, _| c, move |_, _| c);
        let sol = solve_bsde(&tree, &problem).unwrap();
        let closure = solve_bsde(&tree, &BsdeProblem::zero_generator(1, eta.into_iter().map(|v| vec![v]).collect())).unwrap();
        for (node, y) in sol.y.iter() {
            let want = closure.y.at(node).unwrap()[0] + (3 - node.depth) as f64 * c;
            assert!((y[0] - want).abs() < 1e-12);
        }
        assert!(bsde_residual(&tree, &problem, &sol).unwrap() < 1e-11);
    }

    #[test]
    fn residual_detects_perturbation() {
        let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
        let problem = BsdeProblem::zero_generator(1, vec![vec![1.0], vec![2.0], vec![3.0], vec![4.0]]);
        let mut sol = solve_bsde(&tree, &problem).unwrap();
        sol.y.get_mut(NodeId::new(1, 0)).unwrap()[0] += 1.0;
        assert!(bsde_residual(&tree, &problem, &sol).unwrap() >= 1.0 - 1e-9);
    }

    #[test]
    fn zero_data_has_zero_residual() {
        let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
        let problem = BsdeProblem::zero_generator(2, vec![vec![0.0, 0.0]; 4]);
        let sol = solve_bsde(&tree, &problem).unwrap();
        assert!(sol.y.iter().all(|(_, y)| y.iter().all(|&v| v == 0.0)));
        assert_eq!(bsde_residual(&tree, &problem, &sol).unwrap(), 0.0);
    }

    #[test]
    fn non_finite_generator_is_reported() {
        let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
        let problem = BsdeProblem::scalar(vec![0.0; 4], |_, _, _, _| f64::NAN, |_, y| y);
        assert!(matches!(solve_bsde(&tree, &problem), Err(Error::GeneratorEvaluation { .. })));
        let bad = BsdeProblem::zero_generator(1, vec![vec![0.0]; 3]);
        assert!(matches!(solve_bsde(&tree, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn vector_valued_with_z_coupling() {
        // K = 2, generator mixes components and uses z̃; residual must vanish
        let tree = ScenarioTree::<f64>::uniform(3, 2).unwrap();
        let eta: Vec<Vec<f64>> = (0..9).map(|k| vec![k as f64, (k as f64).cos()]).collect();
        let problem = BsdeProblem::new(
            2,
            eta,
            |t, _, y, z| vec![0.1 * y[1] + z[0][0] - z[1][1], t as f64 * 0.05 * y[0].tanh()],
            |_, y| vec![y[0] * 0.2, -y[1]],
        );
        let sol = solve_bsde(&tree, &problem).unwrap();
        assert!(bsde_residual(&tree, &problem, &sol).unwrap() < 1e-11);
    }
}
