//! Martingale difference calculus on the scenario tree.
//!
//! `M_{t+1} = W_{t+1} − E[W_{t+1} | F_t]` takes the value `e_i − P_t` on
//! branch `i`. A row `Z` acts on it through `Z·(e_i − P_t)`, which is blind to
//! adding a constant to every entry of `Z`; the canonical representative of
//! that equivalence class has a zero last entry.

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::{dot, Scalar};
use crate::tree::{NodeId, ScenarioTree};

/// Absolute tolerance for equivalence and identity checks.
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-12;

/// A martingale-integrand row of length `N`, one column per state.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ZRow<T>(pub Vec<T>);

impl<T: Scalar> ZRow<T> {
    pub fn zeros(n: usize) -> Self {
        Self(vec![T::zero(); n])
    }

    /// Row with the given `Ĩ`-contraction and a zero last entry.
    pub fn from_tilde(tilde: &[T]) -> Self {
        let mut v = tilde.to_vec();
        v.push(T::zero());
        Self(v)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    /// Subtracts the last entry from every entry.
    pub fn canonicalize(&self) -> Self {
        let last = self.0.last().copied().unwrap_or(T::zero());
        Self(self.0.iter().map(|&z| z - last).collect())
    }

    /// `ZĨ`: entry `j` is `Z^j − Z^N`, for `j < N`.
    pub fn tilde_contract(&self) -> Vec<T> {
        match self.0.split_last() {
            Some((&last, head)) => head.iter().map(|&z| z - last).collect(),
            None => Vec::new(),
        }
    }

    /// `Z ∼_M Z'`, decided on the `Ĩ`-contractions.
    pub fn equivalent(&self, other: &Self) -> Result<bool> {
        if self.len() != other.len() {
            return Err(Error::ShapeMismatch(format!("rows of length {} and {}", self.len(), other.len())));
        }
        let tol = T::tol(EQUIVALENCE_TOLERANCE);
        Ok(self.tilde_contract().iter().zip(other.tilde_contract()).all(|(&a, b)| (a - b).abs() <= tol))
    }

    /// `Z·(e_i − P)`.
    pub fn apply_increment(&self, probs: &[T], branch: usize) -> T {
        self.0[branch] - dot(&self.0, probs)
    }
}

/// Conditional law of `M_{t+1}` at a node: `(P_t^i, e_i − P_t)` per branch.
pub fn increments<T: Scalar>(tree: &ScenarioTree<T>, node: NodeId) -> Result<Vec<(T, Vec<T>)>> {
    let probs = tree.transition(node)?;
    Ok(probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let v = probs.iter().enumerate().map(|(j, &q)| if i == j { T::one() - q } else { -q }).collect();
            (p, v)
        })
        .collect())
}

/// `E[M_{t+1} M_{t+1}^* | F_t] = diag(P) − P Pᵀ`.
pub fn cond_second_moment<T: Scalar>(tree: &ScenarioTree<T>, node: NodeId) -> Result<Matrix<T>> {
    let p = tree.transition(node)?;
    Ok(second_moment_of(p))
}

pub(crate) fn second_moment_of<T: Scalar>(p: &[T]) -> Matrix<T> {
    Matrix::from_fn(p.len(), p.len(), |r, c| if r == c { p[r] - p[r] * p[c] } else { -p[r] * p[c] })
}

/// `Λ_t^i(ξ)`, which on a tree is the value of `ξ` on child `i`.
pub fn lambda<T: Scalar>(tree: &ScenarioTree<T>, node: NodeId, child_values: &[T], branch: usize) -> Result<T> {
    tree.check_interior(node)?;
    check_children(tree, child_values)?;
    child_values
        .get(branch)
        .copied()
        .ok_or(Error::BranchOutOfRange { branch, branching: tree.branching() })
}

/// Martingale representation `Z_t = Σ_i Λ_t^i(Y) e_i^*` of a child-indexed
/// value, satisfying `Y − E[Y|F_t] = Z_t M_{t+1}`. Not canonicalized.
pub fn represent<T: Scalar>(tree: &ScenarioTree<T>, node: NodeId, child_values: &[T]) -> Result<ZRow<T>> {
    tree.check_interior(node)?;
    check_children(tree, child_values)?;
    Ok(ZRow(child_values.to_vec()))
}

fn check_children<T: Scalar>(tree: &ScenarioTree<T>, child_values: &[T]) -> Result<()> {
    if child_values.len() != tree.branching() {
        return Err(Error::ShapeMismatch(format!(
            "{} child values for branching {}",
            child_values.len(),
            tree.branching()
        )));
    }
    Ok(())
}

/// Constants `L̲ ≤ L̄` bounding `E|Z M|²` by `E‖ZĨ‖²` from both sides.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormConstants<T> {
    pub lower: T,
    pub upper: T,
}

pub fn norm_constants<T: Scalar>(tree: &ScenarioTree<T>) -> NormConstants<T> {
    tree.transition_rows().iter().map(|row| node_norm_constants(row)).fold(
        NormConstants { lower: T::infinity(), upper: T::zero() },
        |acc, c| NormConstants { lower: acc.lower.min(c.lower), upper: acc.upper.max(c.upper) },
    )
}

/// Nodewise version of [`norm_constants`] for a single transition row.
fn node_norm_constants<T: Scalar>(p: &[T]) -> NormConstants<T> {
    let n = p.len();
    let n1 = T::from_usize(n - 1).expect("branching fits");
    let upper = p[..n - 1].iter().fold(T::zero(), |m, &q| m.max((T::one() - q) * q));
    let min_p = p.iter().fold(T::one(), |m, &q| m.min(q));
    NormConstants { lower: T::lit(0.5) * min_p / n1, upper: n1 * upper }
}
