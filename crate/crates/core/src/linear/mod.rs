//! Fully coupled linear forward-backward difference equations (one dimension)
//!
//! ```text
//! ΔX_t = A X + B Y + Z·C + D + (X Ā + Y B̄ + Z C̄ + D̄) M_{t+1}
//! ΔY_t = Â X_{t+1} + B̂ Y_{t+1} + Z_{t+1}·Ĉ + D̂ + Z_t M_{t+1}
//! X_0 = x₀,  Y_T = G X_T + g
//! ```
//!
//! The backward recursion for the affine decoupling `λ_t = P_t X_t + p_t`
//! reduces each node to an `N × N` system `Γ ξ = 𝒜 X + (ℬ Pᵀ + 𝒞) p + 𝒟`
//! in the children's `X`. Unique solvability is read off the invertibility of
//! every `Γ`.

mod riccati;
mod solve;

pub use riccati::{riccati_backward, GammaVerdict, RiccatiData, SINGULARITY_THRESHOLD};
pub use solve::{
    decoupling_coefficients, solve_linear, solve_special, special_coefficients, Decoupling, LinearOutcome,
    LinearSolve, SpecialInputs, SpecialSolver,
};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::martingale::ZRow;
use crate::scalar::{dot, Scalar};
use crate::solution::Residuals;
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree};

/// Tolerance for the zero-column-sum conditions on `C`, `Ĉ` and `C̄`.
pub const COLUMN_SUM_TOLERANCE: f64 = 1e-12;

/// Coefficients of the linear equation. Forward coefficients live on non-leaf
/// nodes (`t ∈ [0, T−1]`), backward ones on `t ∈ [1, T]`, the terminal pair on
/// leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearCoefficients<T> {
    /// `A`
    pub drift_x: AdaptedProcess<T>,
    /// `B`
    pub drift_y: AdaptedProcess<T>,
    /// `C`, a column of `N` paired with `Z` as `Z·C`.
    pub drift_z: AdaptedProcess<Vec<T>>,
    /// `D`
    pub drift_const: AdaptedProcess<T>,
    /// `Ā`, a row of `N`.
    pub vol_x: AdaptedProcess<Vec<T>>,
    /// `B̄`
    pub vol_y: AdaptedProcess<Vec<T>>,
    /// `C̄`, `N × N`, acting as `Z C̄`.
    pub vol_z: AdaptedProcess<Matrix<T>>,
    /// `D̄`
    pub vol_const: AdaptedProcess<Vec<T>>,
    /// `Â`
    pub gen_x: AdaptedProcess<T>,
    /// `B̂`
    pub gen_y: AdaptedProcess<T>,
    /// `Ĉ`, a column of `N`.
    pub gen_z: AdaptedProcess<Vec<T>>,
    /// `D̂`
    pub gen_const: AdaptedProcess<T>,
    /// `G`
    pub terminal_slope: AdaptedProcess<T>,
    /// `g`
    pub terminal_offset: AdaptedProcess<T>,
}

impl<T: Scalar> LinearCoefficients<T> {
    /// All coefficients zero.
    pub fn zeros(tree: &ScenarioTree<T>) -> Self {
        let n = tree.branching();
        let h = tree.horizon();
        let fwd = |tree: &ScenarioTree<T>| AdaptedProcess::from_fn(tree, 0, h - 1, |_| T::zero());
        let fwd_row = |tree: &ScenarioTree<T>| AdaptedProcess::from_fn(tree, 0, h - 1, |_| vec![T::zero(); n]);
        let bwd = |tree: &ScenarioTree<T>| AdaptedProcess::from_fn(tree, 1, h, |_| T::zero());
        Self {
            drift_x: fwd(tree),
            drift_y: fwd(tree),
            drift_z: fwd_row(tree),
            drift_const: fwd(tree),
            vol_x: fwd_row(tree),
            vol_y: fwd_row(tree),
            vol_z: AdaptedProcess::from_fn(tree, 0, h - 1, |_| Matrix::zeros(n, n)),
            vol_const: fwd_row(tree),
            gen_x: bwd(tree),
            gen_y: bwd(tree),
            gen_z: AdaptedProcess::from_fn(tree, 1, h, |_| vec![T::zero(); n]),
            gen_const: bwd(tree),
            terminal_slope: AdaptedProcess::from_fn(tree, h, h, |_| T::zero()),
            terminal_offset: AdaptedProcess::from_fn(tree, h, h, |_| T::zero()),
        }
    }

    /// Checks ranges, shapes, finiteness and the zero-column-sum assumption.
    pub fn validate(&self, tree: &ScenarioTree<T>) -> Result<()> {
        let h = tree.horizon();
        let n = tree.branching();
        fn range<V>(p: &AdaptedProcess<V>, name: &str, start: usize, end: usize) -> Result<()> {
            if p.start() != start || p.end() != end {
                return Err(Error::ShapeMismatch(format!(
                    "{name} must cover times {start}..={end}, covers {}..={}",
                    p.start(),
                    p.end()
                )));
            }
            Ok(())
        }
        let finite = |name: &str, ok: bool| if ok { Ok(()) } else { Err(Error::NonFiniteInput(name.to_string())) };

        for (name, p) in [("A", &self.drift_x), ("B", &self.drift_y), ("D", &self.drift_const)] {
            range(p, name, 0, h - 1)?;
            finite(name, p.iter().all(|(_, v)| v.is_finite()))?;
        }
        for (name, p) in [("Â", &self.gen_x), ("B̂", &self.gen_y), ("D̂", &self.gen_const)] {
            range(p, name, 1, h)?;
            finite(name, p.iter().all(|(_, v)| v.is_finite()))?;
        }
        for (name, p) in [("G", &self.terminal_slope), ("g", &self.terminal_offset)] {
            range(p, name, h, h)?;
            finite(name, p.iter().all(|(_, v)| v.is_finite()))?;
        }
        for (name, p, start, end) in [
            ("C", &self.drift_z, 0, h - 1),
            ("Ā", &self.vol_x, 0, h - 1),
            ("B̄", &self.vol_y, 0, h - 1),
            ("D̄", &self.vol_const, 0, h - 1),
            ("Ĉ", &self.gen_z, 1, h),
        ] {
            range(p, name, start, end)?;
            if let Some((node, _)) = p.iter().find(|(_, v)| v.len() != n) {
                return Err(Error::ShapeMismatch(format!("{name} at {node} must have {n} entries")));
            }
            finite(name, p.iter().all(|(_, v)| v.iter().all(|x| x.is_finite())))?;
        }
        range(&self.vol_z, "C̄", 0, h - 1)?;
        if let Some((node, _)) = self.vol_z.iter().find(|(_, m)| m.nrows() != n || m.ncols() != n) {
            return Err(Error::ShapeMismatch(format!("C̄ at {node} must be {n}x{n}")));
        }
        finite("C̄", self.vol_z.iter().all(|(_, m)| m.is_finite()))?;

        let tol = T::tol(COLUMN_SUM_TOLERANCE);
        let sums_to_zero = |v: &[T]| v.iter().fold(T::zero(), |a, &x| a + x).abs() <= tol;
        for (node, c) in self.drift_z.iter() {
            if !sums_to_zero(c) {
                return Err(Error::AssumptionViolation { condition: "1_N C_t = 0", node });
            }
        }
        for (node, c) in self.gen_z.iter() {
            if node.depth == h {
                if c.iter().any(|&v| v != T::zero()) {
                    return Err(Error::AssumptionViolation { condition: "Ĉ_T = 0", node });
                }
            } else if !sums_to_zero(c) {
                return Err(Error::AssumptionViolation { condition: "1_N Ĉ_t = 0", node });
            }
        }
        for (node, m) in self.vol_z.iter() {
            for col in 0..n {
                let column: Vec<T> = (0..n).map(|r| m[(r, col)]).collect();
                if !sums_to_zero(&column) {
                    return Err(Error::AssumptionViolation { condition: "1_N C̄_t^i = 0", node });
                }
            }
        }
        Ok(())
    }

    /// Zeroes the coupling coefficients `B, C, B̄, C̄`, leaving a forward
    /// equation that no longer sees `(Y, Z)`.
    pub fn decoupled(&self) -> Self {
        let mut out = self.clone();
        out.drift_y = out.drift_y.map(|_, _| T::zero());
        out.drift_z = out.drift_z.map(|_, c| vec![T::zero(); c.len()]);
        out.vol_y = out.vol_y.map(|_, c| vec![T::zero(); c.len()]);
        out.vol_z = out.vol_z.map(|_, m| Matrix::zeros(m.nrows(), m.ncols()));
        out
    }
}

/// The per-node objects `𝒜, ℬ, 𝒞, 𝒟` with `𝒟 = 1·D + (I − 1Pᵀ) D̄ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptCoeffs<T> {
    pub a: Vec<T>,
    pub b: Vec<T>,
    pub c: Matrix<T>,
    pub d: Vec<T>,
}

/// `(I − 1Pᵀ) v` for a row `v`, i.e. entries `v_i − v·P`.
fn centered<T: Scalar>(v: &[T], probs: &[T]) -> Vec<T> {
    let mean = dot(v, probs);
    v.iter().map(|&x| x - mean).collect()
}

pub fn script_coeffs<T: Scalar>(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>, node: NodeId) -> Result<ScriptCoeffs<T>> {
    let probs = tree.transition(node)?;
    let n = tree.branching();
    let one = T::one();

    let a_bar = centered(coeffs.vol_x.at(node)?, probs);
    let drift_x = *coeffs.drift_x.at(node)?;
    let a = a_bar.iter().map(|&v| one + drift_x + v).collect();
    let b_bar = centered(coeffs.vol_y.at(node)?, probs);
    let drift_y = *coeffs.drift_y.at(node)?;
    let b = b_bar.iter().map(|&v| drift_y + v).collect();
    let d_bar = centered(coeffs.vol_const.at(node)?, probs);
    let drift_const = *coeffs.drift_const.at(node)?;
    let d = d_bar.iter().map(|&v| drift_const + v).collect();

    // 𝒞[i][j] = C_j + (C̄ (e_i − P))_j
    let cz = coeffs.drift_z.at(node)?;
    let cbar = coeffs.vol_z.at(node)?;
    let c = Matrix::from_fn(n, n, |i, j| {
        let row: Vec<T> = (0..n).map(|k| cbar[(j, k)]).collect();
        cz[j] + row[i] - dot(&row, probs)
    });
    Ok(ScriptCoeffs { a, b, c, d })
}

/// Per-branch residuals of both equations, with `Y_T = G X_T + g` counted in
/// the backward residual.
pub fn linear_residual<T: Scalar>(
    tree: &ScenarioTree<T>,
    coeffs: &LinearCoefficients<T>,
    x: &AdaptedProcess<T>,
    y: &AdaptedProcess<T>,
    z: &AdaptedProcess<ZRow<T>>,
) -> Result<Residuals<T>> {
    let h = tree.horizon();
    let n = tree.branching();
    let mut res = Residuals { forward: T::zero(), backward: T::zero() };
    for leaf in tree.leaves() {
        let want = *coeffs.terminal_slope.at(leaf)? * *x.at(leaf)? + *coeffs.terminal_offset.at(leaf)?;
        res.backward = res.backward.max((*y.at(leaf)? - want).abs());
    }
    for t in 0..h {
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let (xv, yv, zv) = (*x.at(node)?, *y.at(node)?, z.at(node)?);
            if zv.len() != n {
                return Err(Error::ShapeMismatch(format!("Z at {node} must have {n} entries")));
            }
            let drift = *coeffs.drift_x.at(node)? * xv
                + *coeffs.drift_y.at(node)? * yv
                + dot(zv.as_slice(), coeffs.drift_z.at(node)?)
                + *coeffs.drift_const.at(node)?;
            // row X Ā + Y B̄ + Z C̄ + D̄
            let cbar = coeffs.vol_z.at(node)?;
            let (ax, by, dd) = (coeffs.vol_x.at(node)?, coeffs.vol_y.at(node)?, coeffs.vol_const.at(node)?);
            let vol = ZRow(
                (0..n)
                    .map(|j| xv * ax[j] + yv * by[j] + (0..n).fold(T::zero(), |a, k| a + zv.0[k] * cbar[(k, j)]) + dd[j])
                    .collect(),
            );
            for i in 0..n {
                let child = tree.child(node, i);
                let (xc, yc) = (*x.at(child)?, *y.at(child)?);
                let fwd = xc - xv - drift - vol.apply_increment(probs, i);
                res.forward = res.forward.max(fwd.abs());
                let mut gen = *coeffs.gen_x.at(child)? * xc + *coeffs.gen_y.at(child)? * yc + *coeffs.gen_const.at(child)?;
                if child.depth < h {
                    gen = gen + dot(z.at(child)?.as_slice(), coeffs.gen_z.at(child)?);
                }
                let bwd = yc - yv - gen - zv.apply_increment(probs, i);
                res.backward = res.backward.max(bwd.abs());
            }
        }
    }
    Ok(res)
}
