//! Nonlinear forward-backward difference equations in one dimension
//!
//! ```text
//! ΔX_t = b(t, X_t, Y_t, Z_tĨ) + σ(t, X_t, Y_t, Z_tĨ) M_{t+1}
//! ΔY_t = −f(t+1, X_{t+1}, Y_{t+1}, Z_{t+1}Ĩ) + Z_t M_{t+1}
//! X_0 = x₀,  Y_T = h(X_T)
//! ```
//!
//! solved by continuation from the linear equation `b = −y, σ = −z, f = x,
//! h = x` at `α = 0` to the target at `α = 1`.

mod continuation;
mod diagnostics;

pub use continuation::{
    solve_at_level, solve_continuation, solve_continuation_from, solve_flat_picard, solve_nonlinear,
    ContinuationOptions, LevelStats, Mode, NonlinearSolve, SolveError, SolveFailure, SolveStats,
};
pub use diagnostics::{check_assumptions, AssumptionReport, Clause, Verdict, Witness, SAMPLE_RADIUS};

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linear::{LinearCoefficients, SpecialInputs};
use crate::martingale::ZRow;
use crate::scalar::{dot, Scalar};
use crate::solution::{FbsdeSolution, Residuals};
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree};

/// `(t, node, x, y, z̃) → value`, with `z̃ = ZĨ` of length `N − 1`.
pub type CoefficientFn<T> = Arc<dyn Fn(usize, NodeId, T, T, &[T]) -> T + Send + Sync>;
/// `(t, node, x, y, z̃) → row of N`.
pub type RowFn<T> = Arc<dyn Fn(usize, NodeId, T, T, &[T]) -> Vec<T> + Send + Sync>;
/// `(node, x, y) → value`, the generator at the horizon.
pub type TerminalGeneratorFn<T> = Arc<dyn Fn(NodeId, T, T) -> T + Send + Sync>;
/// `(node, x) → value`.
pub type TerminalFn<T> = Arc<dyn Fn(NodeId, T) -> T + Send + Sync>;

#[derive(Clone)]
pub struct NonlinearProblem<T> {
    /// `b`, for `t ∈ [0, T−1]`.
    pub drift: CoefficientFn<T>,
    /// `σ`, for `t ∈ [0, T−1]`.
    pub vol: RowFn<T>,
    /// `f`, for `t ∈ [1, T−1]`.
    pub generator: CoefficientFn<T>,
    /// `f(T, ·)`, which never sees `z`.
    pub terminal_generator: TerminalGeneratorFn<T>,
    /// `h`
    pub terminal: TerminalFn<T>,
    /// Lipschitz constant, if known.
    pub lipschitz: Option<T>,
    /// Monotonicity constant, if known.
    pub monotonicity: Option<T>,
}

impl<T> fmt::Debug for NonlinearProblem<T>
where
    T: fmt::Debug,
{
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonlinearProblem")
            .field("lipschitz", &self.lipschitz)
            .field("monotonicity", &self.monotonicity)
            .finish_non_exhaustive()
    }
}

/// The row `(−z̃, 0)`.
fn negated_row<T: Scalar>(zt: &[T]) -> Vec<T> {
    zt.iter().map(|&v| -v).chain(std::iter::once(T::zero())).collect()
}

impl<T: Scalar> NonlinearProblem<T> {
    pub fn new(
        drift: impl Fn(usize, NodeId, T, T, &[T]) -> T + Send + Sync + 'static,
        vol: impl Fn(usize, NodeId, T, T, &[T]) -> Vec<T> + Send + Sync + 'static,
        generator: impl Fn(usize, NodeId, T, T, &[T]) -> T + Send + Sync + 'static,
        terminal_generator: impl Fn(NodeId, T, T) -> T + Send + Sync + 'static,
        terminal: impl Fn(NodeId, T) -> T + Send + Sync + 'static,
    ) -> Self {
        Self {
            drift: Arc::new(drift),
            vol: Arc::new(vol),
            generator: Arc::new(generator),
            terminal_generator: Arc::new(terminal_generator),
            terminal: Arc::new(terminal),
            lipschitz: None,
            monotonicity: None,
        }
    }

    /// `b = −y`, `σ = (−z̃, 0)`, `f = x`, `h = x`.
    pub fn linear_special() -> Self {
        Self::new(|_, _, _, y, _| -y, |_, _, _, _, zt| negated_row(zt), |_, _, x, _, _| x, |_, x, _| x, |_, x| x)
    }

    /// `b = −y + κ tanh x`, `σ = (−z̃, 0)`, `f = x + κ tanh y`, `h = x`.
    pub fn monotone_family(kappa: T) -> Self {
        Self::new(
            move |_, _, x, y, _| -y + kappa * x.tanh(),
            |_, _, _, _, zt| negated_row(zt),
            move |_, _, x, y, _| x + kappa * y.tanh(),
            move |_, x, y| x + kappa * y.tanh(),
            |_, x| x,
        )
    }

    /// The linear equation written in nonlinear form. `Z·C` and `Z C̄` only
    /// depend on `ZĨ` because their columns sum to zero.
    pub fn from_linear(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>) -> Result<Self> {
        coeffs.validate(tree)?;
        let n = tree.branching();
        let c = Arc::new(coeffs.clone());
        let (c1, c2, c3, c4, c5) = (c.clone(), c.clone(), c.clone(), c.clone(), c);
        let at = |p: &AdaptedProcess<T>, node: NodeId| *p.get(node).expect("coefficient in range");
        let row = |p: &AdaptedProcess<Vec<T>>, node: NodeId| p.get(node).expect("coefficient in range").clone();
        Ok(Self::new(
            move |_, node, x, y, zt| {
                at(&c1.drift_x, node) * x
                    + at(&c1.drift_y, node) * y
                    + dot(zt, &row(&c1.drift_z, node)[..n - 1])
                    + at(&c1.drift_const, node)
            },
            move |_, node, x, y, zt| {
                let (a, b, d) = (row(&c2.vol_x, node), row(&c2.vol_y, node), row(&c2.vol_const, node));
                let m = c2.vol_z.get(node).expect("coefficient in range");
                (0..n)
                    .map(|j| x * a[j] + y * b[j] + (0..n - 1).fold(T::zero(), |s, k| s + zt[k] * m[(k, j)]) + d[j])
                    .collect()
            },
            move |_, node, x, y, zt| {
                -(at(&c3.gen_x, node) * x
                    + at(&c3.gen_y, node) * y
                    + dot(zt, &row(&c3.gen_z, node)[..n - 1])
                    + at(&c3.gen_const, node))
            },
            move |node, x, y| -(at(&c4.gen_x, node) * x + at(&c4.gen_y, node) * y + at(&c4.gen_const, node)),
            move |node, x| at(&c5.terminal_slope, node) * x + at(&c5.terminal_offset, node),
        ))
    }

    pub fn with_constants(mut self, lipschitz: Option<T>, monotonicity: Option<T>) -> Self {
        self.lipschitz = lipschitz;
        self.monotonicity = monotonicity;
        self
    }

    /// `α·(b, σ, f, h) + (1 − α)·(−y, −z, x, x)`.
    pub fn blend(&self, alpha: T) -> Result<Self> {
        if !(alpha >= T::zero() && alpha <= T::one()) {
            return Err(Error::AlphaOutOfRange(alpha.as_f64()));
        }
        if alpha == T::one() {
            return Ok(self.clone());
        }
        if alpha == T::zero() {
            return Ok(Self::linear_special());
        }
        let rest = T::one() - alpha;
        let (b, s, f, ft, h) =
            (self.drift.clone(), self.vol.clone(), self.generator.clone(), self.terminal_generator.clone(), self.terminal.clone());
        Ok(Self::new(
            move |t, node, x, y, zt| alpha * b(t, node, x, y, zt) + rest * -y,
            move |t, node, x, y, zt| {
                s(t, node, x, y, zt).into_iter().zip(negated_row(zt)).map(|(v, w)| alpha * v + rest * w).collect()
            },
            move |t, node, x, y, zt| alpha * f(t, node, x, y, zt) + rest * x,
            move |node, x, y| alpha * ft(node, x, y) + rest * x,
            move |node, x| alpha * h(node, x) + rest * x,
        ))
    }

    pub(crate) fn generator_at(&self, tree: &ScenarioTree<T>, node: NodeId, x: T, y: T, zt: Option<&[T]>) -> T {
        if node.depth == tree.horizon() {
            (self.terminal_generator)(node, x, y)
        } else {
            (self.generator)(node.depth, node, x, y, zt.expect("z below the horizon"))
        }
    }
}

/// Additive forcing `(b₀, σ₀, f₀, h₀)` of the continuation family.
#[derive(Debug, Clone, PartialEq)]
pub struct Inhomogeneity<T> {
    /// `b₀` over `[0, T−1]`.
    pub drift: AdaptedProcess<T>,
    /// `σ₀` over `[0, T−1]`, rows of `N`.
    pub vol: AdaptedProcess<Vec<T>>,
    /// `f₀` over `[1, T]`.
    pub generator: AdaptedProcess<T>,
    /// `h₀` at leaves.
    pub terminal: AdaptedProcess<T>,
}

impl<T: Scalar> Inhomogeneity<T> {
    pub fn zeros(tree: &ScenarioTree<T>) -> Self {
        let s = SpecialInputs::zeros(tree);
        Self { drift: s.drift_const, vol: s.vol_const, generator: s.gen_const, terminal: s.terminal_offset }
    }

    /// Inputs of the special linear equation at `α = 0`, where the generator
    /// enters with the opposite sign.
    pub fn to_special(&self) -> SpecialInputs<T> {
        SpecialInputs {
            drift_const: self.drift.clone(),
            vol_const: self.vol.clone(),
            gen_const: self.generator.map(|_, &v| -v),
            terminal_offset: self.terminal.clone(),
        }
    }
}

fn check_shapes<T: Scalar>(tree: &ScenarioTree<T>, x: &AdaptedProcess<T>, y: &AdaptedProcess<T>, z: &AdaptedProcess<ZRow<T>>) -> Result<()> {
    let h = tree.horizon();
    let n = tree.branching();
    let ok = x.start() == 0
        && x.end() == h
        && y.start() == 0
        && y.end() == h
        && z.start() == 0
        && z.end() + 1 == h
        && z.iter().all(|(_, r)| r.len() == n);
    if ok {
        Ok(())
    } else {
        Err(Error::ShapeMismatch("solution must cover X, Y on [0, T] and Z rows of N on [0, T−1]".into()))
    }
}

/// Per-branch residuals with optional forcing; the terminal mismatch
/// `Y_T − h(X_T) − h₀` counts as backward.
pub(crate) fn residual_with<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    forcing: Option<&Inhomogeneity<T>>,
    x: &AdaptedProcess<T>,
    y: &AdaptedProcess<T>,
    z: &AdaptedProcess<ZRow<T>>,
) -> Result<Residuals<T>> {
    check_shapes(tree, x, y, z)?;
    let h = tree.horizon();
    let n = tree.branching();
    let zero = T::zero();
    let get = |p: &AdaptedProcess<T>, node| *p.get(node).expect("checked shape");
    let mut res = Residuals { forward: zero, backward: zero };
    for leaf in tree.leaves() {
        let extra = forcing.map_or(zero, |f| get(&f.terminal, leaf));
        let want = (problem.terminal)(leaf, get(x, leaf)) + extra;
        res.backward = res.backward.max((get(y, leaf) - want).abs());
    }
    let tildes: AdaptedProcess<Vec<T>> = z.map(|_, r| r.tilde_contract());
    for t in 0..h {
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let (xv, yv) = (get(x, node), get(y, node));
            let zt = tildes.get(node).expect("checked shape");
            let zrow = z.get(node).expect("checked shape");
            let mut drift = (problem.drift)(t, node, xv, yv, zt);
            let mut vol = (problem.vol)(t, node, xv, yv, zt);
            if vol.len() != n {
                return Err(Error::ShapeMismatch(format!("σ at {node} returned {} entries", vol.len())));
            }
            if let Some(f) = forcing {
                drift = drift + get(&f.drift, node);
                for (v, w) in vol.iter_mut().zip(f.vol.get(node).expect("forcing in range")) {
                    *v = *v + *w;
                }
            }
            let vol = ZRow(vol);
            for i in 0..n {
                let child = tree.child(node, i);
                let (xc, yc) = (get(x, child), get(y, child));
                let fwd = xc - xv - drift - vol.apply_increment(probs, i);
                let mut gen = problem.generator_at(tree, child, xc, yc, tildes.get(child).map(Vec::as_slice));
                if let Some(f) = forcing {
                    gen = gen + get(&f.generator, child);
                }
                let bwd = yc - yv + gen - zrow.apply_increment(probs, i);
                if !(fwd.is_finite() && bwd.is_finite()) {
                    return Ok(Residuals { forward: T::infinity(), backward: T::infinity() });
                }
                res.forward = res.forward.max(fwd.abs());
                res.backward = res.backward.max(bwd.abs());
            }
        }
    }
    Ok(res)
}

/// Largest per-branch defects of the forward and backward equations.
pub fn nonlinear_residual<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    solution: &FbsdeSolution<T>,
) -> Result<Residuals<T>> {
    residual_with(tree, problem, None, &solution.x, &solution.y, &solution.z)
}
