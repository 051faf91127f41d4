use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::martingale::ZRow;
use crate::scalar::{dot, Scalar};
use crate::solution::FbsdeSolution;
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree};

use super::riccati::{assemble, offset_pass, slope_pass, Forcing, OffsetPass, RiccatiData, SlopePass};
use super::{linear_residual, LinearCoefficients};

#[derive(Debug, Clone)]
pub struct LinearSolve<T> {
    pub solution: FbsdeSolution<T>,
    pub riccati: RiccatiData<T>,
}

#[derive(Debug, Clone)]
pub enum LinearOutcome<T> {
    Solved(Box<LinearSolve<T>>),
    /// Some `Γ` is singular; `singular` lists the offending nodes of the first
    /// such level.
    Unsolvable { singular: Vec<NodeId>, riccati: RiccatiData<T> },
}

impl<T> LinearOutcome<T> {
    pub fn solved(self) -> Option<LinearSolve<T>> {
        match self {
            LinearOutcome::Solved(s) => Some(*s),
            LinearOutcome::Unsolvable { .. } => None,
        }
    }
}

fn check_start<T: Scalar>(x0: T) -> Result<()> {
    if x0.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteInput("x0".into()))
    }
}

/// Forward sweep through the decoupling: children of `X` from `ξ = uX + v`,
/// then `Y` and `Z` from `λ = P ξ + p` on the children.
fn sweep<T: Scalar>(tree: &ScenarioTree<T>, slope: &SlopePass<T>, offset: &OffsetPass<T>, forcing: Forcing<'_, T>, x0: T) -> Result<(AdaptedProcess<T>, AdaptedProcess<T>, AdaptedProcess<ZRow<T>>)> {
    let h = tree.horizon();
    let n = tree.branching();
    let mut x_levels: Vec<Vec<T>> = vec![vec![x0]];
    let mut y_levels: Vec<Vec<T>> = Vec::with_capacity(h + 1);
    let mut z_levels: Vec<Vec<ZRow<T>>> = Vec::with_capacity(h);
    for t in 0..h {
        let next_slope = slope.slope.level(t + 1).expect("solvable");
        let next_offset = offset.offset.level(t + 1).expect("solvable");
        let mut xs = Vec::with_capacity(tree.level_size(t + 1));
        let mut ys = Vec::with_capacity(tree.level_size(t));
        let mut zs = Vec::with_capacity(tree.level_size(t));
        for node in tree.nodes(t) {
            let x = x_levels[t][node.index];
            let gain = slope.gains.at(node)?.as_ref().expect("solvable");
            let shift = offset.shifts.at(node)?.as_ref().expect("solvable");
            let probs = tree.transition(node)?;
            let base = node.index * n;
            let mut lam = Vec::with_capacity(n);
            for i in 0..n {
                let xi = gain.u[i] * x + shift[i];
                xs.push(xi);
                lam.push(next_slope[base + i] * xi + next_offset[base + i]);
            }
            ys.push(dot(probs, &lam));
            zs.push(ZRow(lam).canonicalize());
        }
        x_levels.push(xs);
        y_levels.push(ys);
        z_levels.push(zs);
    }
    let leaves: Vec<T> = tree
        .leaves()
        .map(|leaf| -> Result<T> {
            Ok(*slope.terminal_slope.at(leaf)? * x_levels[h][leaf.index] + *forcing.terminal_offset.at(leaf)?)
        })
        .collect::<Result<_>>()?;
    y_levels.push(leaves);
    Ok((AdaptedProcess::new(tree, 0, x_levels)?, AdaptedProcess::new(tree, 0, y_levels)?, AdaptedProcess::new(tree, 0, z_levels)?))
}

fn finish<T: Scalar>(
    tree: &ScenarioTree<T>,
    coeffs: &LinearCoefficients<T>,
    slope: &SlopePass<T>,
    offset: &OffsetPass<T>,
    x0: T,
) -> Result<FbsdeSolution<T>> {
    let (x, y, z) = sweep(tree, slope, offset, Forcing::of(coeffs), x0)?;
    let residuals = linear_residual(tree, coeffs, &x, &y, &z)?;
    Ok(FbsdeSolution { x, y, z, residuals })
}

/// Solves the linear equation when every `Γ` is invertible, and otherwise
/// returns the singular nodes.
pub fn solve_linear<T: Scalar>(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>, x0: T) -> Result<LinearOutcome<T>> {
    check_start(x0)?;
    coeffs.validate(tree)?;
    let slope = slope_pass(tree, coeffs)?;
    let offset = offset_pass(tree, &slope, Forcing::of(coeffs))?;
    if !slope.singular.is_empty() {
        let singular = slope.singular.clone();
        return Ok(LinearOutcome::Unsolvable { singular, riccati: assemble(slope, offset.offset) });
    }
    let solution = finish(tree, coeffs, &slope, &offset, x0)?;
    Ok(LinearOutcome::Solved(Box::new(LinearSolve { solution, riccati: assemble(slope, offset.offset) })))
}

/// Inhomogeneous data of the special equation
///
/// ```text
/// ΔX_t = −Y_t + D_t + (−Z_t Ĩ + D̄_t) M_{t+1}
/// ΔY_t = −X_{t+1} + D̂_{t+1} + Z_t M_{t+1}
/// Y_T  = X_T + g
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct SpecialInputs<T> {
    /// Over `[0, T−1]`.
    pub drift_const: AdaptedProcess<T>,
    /// Rows of `N`, over `[0, T−1]`.
    pub vol_const: AdaptedProcess<Vec<T>>,
    /// Over `[1, T]`.
    pub gen_const: AdaptedProcess<T>,
    /// At leaves.
    pub terminal_offset: AdaptedProcess<T>,
}

impl<T: Scalar> SpecialInputs<T> {
    pub fn zeros(tree: &ScenarioTree<T>) -> Self {
        let h = tree.horizon();
        let n = tree.branching();
        Self {
            drift_const: AdaptedProcess::from_fn(tree, 0, h - 1, |_| T::zero()),
            vol_const: AdaptedProcess::from_fn(tree, 0, h - 1, |_| vec![T::zero(); n]),
            gen_const: AdaptedProcess::from_fn(tree, 1, h, |_| T::zero()),
            terminal_offset: AdaptedProcess::from_fn(tree, h, h, |_| T::zero()),
        }
    }

    fn forcing(&self) -> Forcing<'_, T> {
        Forcing {
            drift_const: &self.drift_const,
            vol_const: &self.vol_const,
            gen_const: &self.gen_const,
            terminal_offset: &self.terminal_offset,
        }
    }
}

/// Coefficients of the special equation with zero inhomogeneities:
/// `B = Â = −1`, `C̄ = −[Ĩ | 0]`, `G = 1`.
pub fn special_coefficients<T: Scalar>(tree: &ScenarioTree<T>) -> LinearCoefficients<T> {
    let n = tree.branching();
    let mut c = LinearCoefficients::zeros(tree);
    c.drift_y = c.drift_y.map(|_, _| -T::one());
    c.gen_x = c.gen_x.map(|_, _| -T::one());
    // row k of Z C̄ = −Z Ĩ padded with a zero column: C̄[k][j] = −(δ_kj − δ_kN) for j < N
    let pad = Matrix::from_fn(n, n, |k, j| {
        if j == n - 1 {
            T::zero()
        } else if k == j {
            -T::one()
        } else if k == n - 1 {
            T::one()
        } else {
            T::zero()
        }
    });
    c.vol_z = c.vol_z.map(|_, _| pad.clone());
    c.terminal_slope = c.terminal_slope.map(|_, _| T::one());
    c
}

/// Solver for the special equation with the inhomogeneity-free recursion
/// computed once and reused across calls.
#[derive(Debug, Clone)]
pub struct SpecialSolver<T> {
    base: LinearCoefficients<T>,
    slope: SlopePass<T>,
}

impl<T: Scalar> SpecialSolver<T> {
    pub fn new(tree: &ScenarioTree<T>) -> Result<Self> {
        let base = special_coefficients(tree);
        let slope = slope_pass(tree, &base)?;
        if let Some(&node) = slope.singular.first() {
            // slope values stay above 1, so this only trips on broken arithmetic
            return Err(Error::SingularCertificate { nodes: vec![node] });
        }
        Ok(Self { base, slope })
    }

    /// The `P` levels of the recursion.
    pub fn slope(&self) -> &AdaptedProcess<T> {
        &self.slope.slope
    }

    pub fn coefficients(&self, inputs: &SpecialInputs<T>) -> LinearCoefficients<T> {
        let mut c = self.base.clone();
        c.drift_const = inputs.drift_const.clone();
        c.vol_const = inputs.vol_const.clone();
        c.gen_const = inputs.gen_const.clone();
        c.terminal_offset = inputs.terminal_offset.clone();
        c
    }

    fn check(&self, tree: &ScenarioTree<T>, inputs: &SpecialInputs<T>, x0: T) -> Result<()> {
        check_start(x0)?;
        let h = tree.horizon();
        let n = tree.branching();
        let ranges = [
            ("D", inputs.drift_const.start(), inputs.drift_const.end(), 0, h - 1),
            ("D̄", inputs.vol_const.start(), inputs.vol_const.end(), 0, h - 1),
            ("D̂", inputs.gen_const.start(), inputs.gen_const.end(), 1, h),
            ("g", inputs.terminal_offset.start(), inputs.terminal_offset.end(), h, h),
        ];
        for (name, s, e, want_s, want_e) in ranges {
            if (s, e) != (want_s, want_e) {
                return Err(Error::ShapeMismatch(format!("{name} must cover times {want_s}..={want_e}")));
            }
        }
        if inputs.vol_const.iter().any(|(_, r)| r.len() != n) {
            return Err(Error::ShapeMismatch(format!("D̄ rows must have {n} entries")));
        }
        let finite = inputs.drift_const.iter().all(|(_, v)| v.is_finite())
            && inputs.vol_const.iter().all(|(_, r)| r.iter().all(|v| v.is_finite()))
            && inputs.gen_const.iter().all(|(_, v)| v.is_finite())
            && inputs.terminal_offset.iter().all(|(_, v)| v.is_finite());
        if !finite {
            return Err(Error::NonFiniteInput("special inhomogeneity".into()));
        }
        Ok(())
    }

    pub fn solve(&self, tree: &ScenarioTree<T>, inputs: &SpecialInputs<T>, x0: T) -> Result<FbsdeSolution<T>> {
        self.check(tree, inputs, x0)?;
        let offset = offset_pass(tree, &self.slope, inputs.forcing())?;
        let (x, y, z) = sweep(tree, &self.slope, &offset, inputs.forcing(), x0)?;
        let residuals = linear_residual(tree, &self.coefficients(inputs), &x, &y, &z)?;
        Ok(FbsdeSolution { x, y, z, residuals })
    }

    /// Same as [`SpecialSolver::solve`] without the residual evaluation, which
    /// is left at zero.
    pub fn solve_unchecked(&self, tree: &ScenarioTree<T>, inputs: &SpecialInputs<T>, x0: T) -> Result<FbsdeSolution<T>> {
        self.check(tree, inputs, x0)?;
        let offset = offset_pass(tree, &self.slope, inputs.forcing())?;
        let (x, y, z) = sweep(tree, &self.slope, &offset, inputs.forcing(), x0)?;
        Ok(FbsdeSolution { x, y, z, residuals: Default::default() })
    }

    pub fn riccati(&self, tree: &ScenarioTree<T>, inputs: &SpecialInputs<T>) -> Result<RiccatiData<T>> {
        let offset = offset_pass(tree, &self.slope, inputs.forcing())?;
        Ok(assemble(self.slope.clone(), offset.offset))
    }
}

/// One-shot solve of the special equation.
pub fn solve_special<T: Scalar>(tree: &ScenarioTree<T>, inputs: &SpecialInputs<T>, x0: T) -> Result<LinearSolve<T>> {
    let solver = SpecialSolver::new(tree)?;
    let solution = solver.solve(tree, inputs, x0)?;
    Ok(LinearSolve { solution, riccati: solver.riccati(tree, inputs)? })
}

/// Affine decoupling `Y_t = G_t X_t + g_t` over `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Decoupling<T> {
    pub slope: AdaptedProcess<T>,
    pub offset: AdaptedProcess<T>,
}

/// `G_t = Pᵀ(P_{t+1} ∘ u)` and `g_t = Pᵀ(P_{t+1} ∘ v + p_{t+1})` below the
/// leaves, `G` and `g` at the leaves.
pub fn decoupling_coefficients<T: Scalar>(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>) -> Result<Decoupling<T>> {
    coeffs.validate(tree)?;
    let slope = slope_pass(tree, coeffs)?;
    if !slope.singular.is_empty() {
        return Err(Error::SingularCertificate { nodes: slope.singular });
    }
    let offset = offset_pass(tree, &slope, Forcing::of(coeffs))?;
    let h = tree.horizon();
    let n = tree.branching();
    let mut g_slope: Vec<Vec<T>> = Vec::with_capacity(h + 1);
    let mut g_offset: Vec<Vec<T>> = Vec::with_capacity(h + 1);
    for t in 0..h {
        let next_slope = slope.slope.level(t + 1).expect("solvable");
        let next_offset = offset.offset.level(t + 1).expect("solvable");
        let mut gs = Vec::new();
        let mut os = Vec::new();
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let gain = slope.gains.at(node)?.as_ref().expect("solvable");
            let shift = offset.shifts.at(node)?.as_ref().expect("solvable");
            let base = node.index * n;
            let (mut a, mut b) = (T::zero(), T::zero());
            for i in 0..n {
                a = a + probs[i] * next_slope[base + i] * gain.u[i];
                b = b + probs[i] * (next_slope[base + i] * shift[i] + next_offset[base + i]);
            }
            gs.push(a);
            os.push(b);
        }
        g_slope.push(gs);
        g_offset.push(os);
    }
    g_slope.push(coeffs.terminal_slope.level(h).expect("leaves").to_vec());
    g_offset.push(coeffs.terminal_offset.level(h).expect("leaves").to_vec());
    Ok(Decoupling { slope: AdaptedProcess::new(tree, 0, g_slope)?, offset: AdaptedProcess::new(tree, 0, g_offset)? })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TransitionSpec;

    #[test]
    fn unit_drift_moves_deterministically() {
        let tree = ScenarioTree::<f64>::uniform(2, 3).unwrap();
        let mut c = LinearCoefficients::zeros(&tree);
        c.drift_const = c.drift_const.map(|_, _| 1.0);
        c.terminal_slope = c.terminal_slope.map(|_, _| 1.0);
        let s = solve_linear(&tree, &c, 0.0).unwrap().solved().unwrap().solution;
        for (node, &x) in s.x.iter() {
            assert!((x - node.depth as f64).abs() < 1e-14);
        }
        for (_, &y) in s.y.iter() {
            assert!((y - 3.0).abs() < 1e-14);
        }
        for (_, z) in s.z.iter() {
            assert!(z.0.iter().all(|v| v.abs() < 1e-14));
        }
        assert!(s.residuals.max() < 1e-12);
    }

    #[test]
    fn corollary_slopes() {
        let tree = ScenarioTree::<f64>::uniform(2, 3).unwrap();
        let solver = SpecialSolver::new(&tree).unwrap();
        let p = solver.slope();
        assert!(p.level(3).unwrap().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        assert!(p.level(2).unwrap().iter().all(|&v| (v - 5.0 / 3.0).abs() < 1e-12));
        assert!(p.level(1).unwrap().iter().all(|&v| (v - 13.0 / 8.0).abs() < 1e-12));
    }

    #[test]
    fn special_zero_inputs_give_zero() {
        let tree = ScenarioTree::<f64>::uniform(3, 2).unwrap();
        let out = solve_special(&tree, &SpecialInputs::zeros(&tree), 0.0).unwrap();
        assert!(out.solution.x.iter().all(|(_, &v)| v == 0.0));
        assert!(out.solution.y.iter().all(|(_, &v)| v == 0.0));
        assert!(out.solution.z.iter().all(|(_, z)| z.0.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn special_residuals_small_on_skewed_tree() {
        let tree = ScenarioTree::new(3, 2, TransitionSpec::Table(vec![vec![0.2, 0.5, 0.3]; 4])).unwrap();
        let mut inputs = SpecialInputs::zeros(&tree);
        inputs.drift_const = inputs.drift_const.map(|n, _| 0.3 * n.index as f64 - 0.1);
        inputs.vol_const = inputs.vol_const.map(|n, _| vec![0.1, -0.2 * n.depth as f64, 0.4]);
        inputs.gen_const = inputs.gen_const.map(|n, _| (n.index as f64).sin());
        inputs.terminal_offset = inputs.terminal_offset.map(|n, _| 1.0 - n.index as f64 / 9.0);
        let out = solve_special(&tree, &inputs, 0.7).unwrap();
        assert!(out.solution.residuals.max() < 1e-12, "{:?}", out.solution.residuals);
        let unchecked = SpecialSolver::new(&tree).unwrap().solve_unchecked(&tree, &inputs, 0.7).unwrap();
        assert_eq!(unchecked.x, out.solution.x);
    }

    #[test]
    fn decoupling_for_zero_coefficients() {
        let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
        let mut c = LinearCoefficients::zeros(&tree);
        c.terminal_slope = c.terminal_slope.map(|_, _| 1.0);
        let d = decoupling_coefficients(&tree, &c).unwrap();
        assert!(d.slope.iter().all(|(_, &v)| (v - 1.0).abs() < 1e-14));
        assert!(d.offset.iter().all(|(_, &v)| v == 0.0));
    }

    #[test]
    fn singular_root_is_reported() {
        let tree = ScenarioTree::<f64>::uniform(2, 1).unwrap();
        let mut c = LinearCoefficients::zeros(&tree);
        c.drift_y = c.drift_y.map(|_, _| 1.0);
        c.terminal_slope = c.terminal_slope.map(|_, _| 1.0);
        match solve_linear(&tree, &c, 1.0).unwrap() {
            LinearOutcome::Unsolvable { singular, .. } => assert_eq!(singular, vec![NodeId::ROOT]),
            LinearOutcome::Solved(_) => panic!("expected a singular certificate"),
        }
        assert!(matches!(decoupling_coefficients(&tree, &c), Err(Error::SingularCertificate { .. })));
    }
}
