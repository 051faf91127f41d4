use crate::martingale::ZRow;
use crate::scalar::Scalar;
use crate::tree::{AdaptedProcess, ScenarioTree};

/// Largest per-branch defects of the forward and backward equations.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Residuals<T> {
    pub forward: T,
    pub backward: T,
}

impl<T: Scalar> Residuals<T> {
    pub fn max(&self) -> T {
        self.forward.max(self.backward)
    }
}

/// Node-indexed solution triple of a forward-backward equation.
#[derive(Debug, Clone, PartialEq)]
pub struct FbsdeSolution<T> {
    /// Over `[0, T]`.
    pub x: AdaptedProcess<T>,
    /// Over `[0, T]`.
    pub y: AdaptedProcess<T>,
    /// Canonical rows over `[0, T − 1]`.
    pub z: AdaptedProcess<ZRow<T>>,
    pub residuals: Residuals<T>,
}

impl<T: Scalar> FbsdeSolution<T> {
    /// Sup-distance over nodes of `|X − X'|`, `|Y − Y'|` and the `Ĩ`-contracted
    /// `Z` difference, so `∼_M`-equivalent `Z` compare equal.
    pub fn max_difference(&self, other: &Self) -> T {
        let mut worst = T::zero();
        for ((_, a), (_, b)) in self.x.iter().zip(other.x.iter()) {
            worst = worst.max((*a - *b).abs());
        }
        for ((_, a), (_, b)) in self.y.iter().zip(other.y.iter()) {
            worst = worst.max((*a - *b).abs());
        }
        for ((_, a), (_, b)) in self.z.iter().zip(other.z.iter()) {
            for (u, v) in a.tilde_contract().into_iter().zip(b.tilde_contract()) {
                worst = worst.max((u - v).abs());
            }
        }
        worst
    }

    /// `E Σ_t (|X_t| + |Y_t| + |Z_tĨ|)²` over `t < T`, the squared size used by
    /// the continuation iteration, applied to `self − other`.
    pub fn squared_distance(&self, other: &Self, tree: &ScenarioTree<T>) -> T {
        let mut total = T::zero();
        for t in 0..tree.horizon() {
            for node in tree.nodes(t) {
                let dx = (*self.x.get(node).expect("x") - *other.x.get(node).expect("x")).abs();
                let dy = (*self.y.get(node).expect("y") - *other.y.get(node).expect("y")).abs();
                let za = self.z.get(node).expect("z").tilde_contract();
                let zb = other.z.get(node).expect("z").tilde_contract();
                let dz: Vec<T> = za.iter().zip(&zb).map(|(&a, &b)| a - b).collect();
                let size = dx + dy + crate::scalar::norm2(&dz);
                total = total + tree.node_probability(node) * size * size;
            }
        }
        total
    }

    /// Largest defect of `X_{t+1}Y_{t+1} − X_tY_t = X_{t+1}ΔY_t + ΔX_t Y_t`
    /// over all edges of the tree.
    pub fn product_rule_defect(&self, tree: &ScenarioTree<T>) -> T {
        let mut worst = T::zero();
        for t in 0..tree.horizon() {
            for node in tree.nodes(t) {
                let (x, y) = (*self.x.get(node).expect("x"), *self.y.get(node).expect("y"));
                for child in tree.children(node) {
                    let (x1, y1) = (*self.x.get(child).expect("x"), *self.y.get(child).expect("y"));
                    let lhs = x1 * y1 - x * y;
                    let rhs = x1 * (y1 - y) + (x1 - x) * y;
                    worst = worst.max((lhs - rhs).abs());
                }
            }
        }
        worst
    }
}
