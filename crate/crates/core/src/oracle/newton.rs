use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bsde::{solve_bsde, BsdeProblem};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::martingale::ZRow;
use crate::nonlinear::{nonlinear_residual, NonlinearProblem};
use crate::scalar::Scalar;
use crate::solution::FbsdeSolution;
use crate::tree::{AdaptedProcess, ScenarioTree};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NewtonOptions {
    /// Target for `max |F|`.
    pub tolerance: f64,
    pub max_iter: usize,
    /// Starts in total: the first from `X ≡ x₀`, the rest perturbed.
    pub starts: usize,
    /// Half-width of the uniform perturbation of the extra starts.
    pub spread: f64,
    pub seed: u64,
    /// Relative central-difference step, scaled by `1 + |x|`.
    pub fd_step: f64,
    pub max_backtracks: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self { tolerance: 1e-10, max_iter: 100, starts: 3, spread: 0.5, seed: 0, fd_step: 1e-6, max_backtracks: 30 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StartReport<T> {
    pub converged: bool,
    pub iterations: usize,
    /// Final `max |F|`.
    pub residual: T,
    /// Final forward values on depths `1..T`, level by level.
    pub values: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct OracleSolve<T> {
    /// Solution of the first start that converged.
    pub solution: FbsdeSolution<T>,
    pub starts: Vec<StartReport<T>>,
}

impl<T: Scalar> OracleSolve<T> {
    /// Largest difference in `X` between any two converged starts.
    pub fn start_spread(&self) -> T {
        let done: Vec<&StartReport<T>> = self.starts.iter().filter(|s| s.converged).collect();
        let mut worst = T::zero();
        for a in &done {
            for b in &done {
                for (u, v) in a.values.iter().zip(&b.values) {
                    worst = worst.max((*u - *v).abs());
                }
            }
        }
        worst
    }
}

#[derive(Debug, Clone, thiserror::Error)]
pub enum OracleFailure<T: Scalar> {
    #[error("Newton oracle did not converge (best residual {residual})")]
    NoConvergence { residual: T, best: Box<FbsdeSolution<T>>, starts: Vec<StartReport<T>> },
    #[error(transparent)]
    Invalid(#[from] Error),
}

/// `(Y, Z)` from `X` by backward induction with terminal `h(X_T)`.
fn backward_pair<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x: &AdaptedProcess<T>,
) -> Result<(AdaptedProcess<T>, AdaptedProcess<ZRow<T>>)> {
    let h = tree.horizon();
    let at = |node| *x.get(node).expect("full forward process");
    let terminal = tree.leaves().map(|leaf| (problem.terminal)(leaf, at(leaf))).collect::<Vec<T>>();
    if terminal.iter().any(|v| !v.is_finite()) {
        return Err(Error::GeneratorEvaluation { node: tree.leaves().next().expect("leaf") });
    }
    let bsde = BsdeProblem::scalar(
        terminal,
        |t, node, y, zt| (problem.generator)(t, node, at(node), y, zt),
        |node, y| (problem.terminal_generator)(node, at(node), y),
    );
    let out = solve_bsde(tree, &bsde)?;
    debug_assert_eq!(out.y.end(), h);
    Ok((out.scalar_y(), out.scalar_z()))
}

fn forward_process<T: Scalar>(tree: &ScenarioTree<T>, x0: T, values: &[T]) -> Result<AdaptedProcess<T>> {
    let h = tree.horizon();
    if values.len() != tree.node_count(1, h) {
        return Err(Error::ShapeMismatch(format!("expected {} forward values, got {}", tree.node_count(1, h), values.len())));
    }
    let mut levels = vec![vec![x0]];
    let mut offset = 0;
    for t in 1..=h {
        let size = tree.level_size(t);
        levels.push(values[offset..offset + size].to_vec());
        offset += size;
    }
    AdaptedProcess::new(tree, 0, levels)
}

/// The forward defect `X_{child i} − X − b − σ·(e_i − P)` over every edge,
/// with `(Y, Z)` recomputed from the candidate `X` on depths `1..T`.
pub fn forward_defect<T: Scalar>(tree: &ScenarioTree<T>, problem: &NonlinearProblem<T>, x0: T, values: &[T]) -> Result<Vec<T>> {
    let x = forward_process(tree, x0, values)?;
    let (y, z) = backward_pair(tree, problem, &x)?;
    let n = tree.branching();
    let mut out = Vec::with_capacity(values.len());
    for t in 0..tree.horizon() {
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let (xv, yv) = (*x.get(node).expect("x"), *y.get(node).expect("y"));
            let zt = z.get(node).expect("z").tilde_contract();
            let drift = (problem.drift)(t, node, xv, yv, &zt);
            let vol = ZRow((problem.vol)(t, node, xv, yv, &zt));
            if vol.len() != n {
                return Err(Error::ShapeMismatch(format!("σ at {node} returned {} entries", vol.len())));
            }
            for i in 0..n {
                let xc = *x.get(tree.child(node, i)).expect("x");
                out.push(xc - xv - drift - vol.apply_increment(probs, i));
            }
        }
    }
    Ok(out)
}

/// Central-difference Jacobian with step `rel · (1 + |x_j|)` per column.
pub fn fd_jacobian<T: Scalar>(mut f: impl FnMut(&[T]) -> Result<Vec<T>>, x: &[T], rel: T) -> Result<Matrix<T>> {
    let mut columns = Vec::with_capacity(x.len());
    let mut probe = x.to_vec();
    for j in 0..x.len() {
        let step = rel * (T::one() + x[j].abs());
        probe[j] = x[j] + step;
        let up = f(&probe)?;
        probe[j] = x[j] - step;
        let down = f(&probe)?;
        probe[j] = x[j];
        let two = step + step;
        columns.push(up.iter().zip(&down).map(|(&u, &d)| (u - d) / two).collect::<Vec<T>>());
    }
    let rows = columns.first().map_or(0, Vec::len);
    Ok(Matrix::from_fn(rows, x.len(), |r, c| columns[c][r]))
}

fn sup<T: Scalar>(v: &[T]) -> T {
    v.iter().fold(T::zero(), |m, &x| if x.is_finite() { m.max(x.abs()) } else { T::infinity() })
}

fn newton_from<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    start: Vec<T>,
    opts: &NewtonOptions,
) -> StartReport<T> {
    let defect = |v: &[T]| forward_defect(tree, problem, x0, v);
    let merit = |v: &[T]| defect(v).map_or(T::infinity(), |f| sup(&f));
    let tol = T::lit(opts.tolerance);
    let mut values = start;
    let mut current = match defect(&values) {
        Ok(f) => f,
        Err(_) => return StartReport { converged: false, iterations: 0, residual: T::infinity(), values },
    };
    let mut residual = sup(&current);
    let mut iterations = 0;
    while residual > tol && iterations < opts.max_iter {
        iterations += 1;
        let Ok(jac) = fd_jacobian(defect, &values, T::lit(opts.fd_step)) else { break };
        let rhs: Vec<T> = current.iter().map(|&v| -v).collect();
        let step = match jac.lu() {
            Some(lu) => lu.solve(&rhs),
            None => jac.svd().solve(&rhs, T::tol(1e-12)),
        };
        if !step.iter().all(|v| v.is_finite()) {
            break;
        }
        let mut scale = T::one();
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let trial: Vec<T> = values.iter().zip(&step).map(|(&v, &s)| v + scale * s).collect();
            let r = merit(&trial);
            if r < residual || (r <= tol) {
                accepted = Some((trial, r));
                break;
            }
            scale = scale * T::lit(0.5);
        }
        let Some((trial, r)) = accepted else { break };
        values = trial;
        residual = r;
        current = match defect(&values) {
            Ok(f) => f,
            Err(_) => break,
        };
    }
    StartReport { converged: residual <= tol, iterations, residual, values }
}

fn assemble<T: Scalar>(tree: &ScenarioTree<T>, problem: &NonlinearProblem<T>, x0: T, values: &[T]) -> Result<FbsdeSolution<T>> {
    let x = forward_process(tree, x0, values)?;
    let (y, z) = backward_pair(tree, problem, &x)?;
    let mut s = FbsdeSolution { x, y, z, residuals: Default::default() };
    s.residuals = nonlinear_residual(tree, problem, &s)?;
    Ok(s)
}

/// Damped Newton on the forward values with `(Y, Z)` eliminated by backward
/// induction, run from `X ≡ x₀` and from random perturbations of it.
pub fn solve_oracle<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    opts: &NewtonOptions,
) -> std::result::Result<OracleSolve<T>, OracleFailure<T>> {
    if !x0.is_finite() {
        return Err(Error::NonFiniteInput("x0".into()).into());
    }
    let count = tree.node_count(1, tree.horizon());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let spread = T::lit(opts.spread);
    let mut starts = Vec::new();
    for s in 0..opts.starts.max(1) {
        let init: Vec<T> = (0..count)
            .map(|_| if s == 0 { x0 } else { x0 + spread * T::lit(rng.gen_range(-1.0..1.0)) })
            .collect();
        starts.push(newton_from(tree, problem, x0, init, opts));
    }
    if let Some(done) = starts.iter().find(|s| s.converged) {
        let solution = assemble(tree, problem, x0, &done.values)?;
        return Ok(OracleSolve { solution, starts });
    }
    let best = starts
        .iter()
        .min_by(|a, b| a.residual.partial_cmp(&b.residual).unwrap_or(std::cmp::Ordering::Equal))
        .expect("at least one start");
    let residual = best.residual;
    let solution = assemble(tree, problem, x0, &best.values)?;
    Err(OracleFailure::NoConvergence { residual, best: Box::new(solution), starts })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_problem_is_immediate() {
        let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
        let p = NonlinearProblem::new(|_, _, _, _, _| 0.0, |_, _, _, _, _| vec![0.0; 2], |_, _, _, _, _| 0.0, |_, _, _| 0.0, |_, _| 0.0);
        let out = solve_oracle(&tree, &p, 0.0, &NewtonOptions::default()).unwrap();
        assert!(out.solution.x.iter().all(|(_, &v)| v == 0.0));
        assert!(out.starts[0].iterations <= 1);
    }

    #[test]
    fn jacobian_of_affine_map() {
        let jac = fd_jacobian(|v: &[f64]| Ok(vec![2.0 * v[0] - v[1], 3.0 * v[1] + 1.0]), &[0.5, -1.0], 1e-6).unwrap();
        let want = [[2.0, -1.0], [0.0, 3.0]];
        for r in 0..2 {
            for c in 0..2 {
                assert!((jac[(r, c)] - want[r][c]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn linear_special_agrees_with_recursion() {
        use crate::linear::{solve_special, SpecialInputs};
        let tree = ScenarioTree::<f64>::uniform(3, 2).unwrap();
        let out = solve_oracle(&tree, &NonlinearProblem::linear_special(), 0.8, &NewtonOptions::default()).unwrap();
        let direct = solve_special(&tree, &SpecialInputs::zeros(&tree), 0.8).unwrap().solution;
        assert!(out.solution.max_difference(&direct) < 1e-9);
        assert!(out.start_spread() < 1e-9);
    }
}
