use crate::error::Result;
use crate::linalg::Matrix;
use crate::linear::{linear_residual, LinearCoefficients};
use crate::martingale::ZRow;
use crate::scalar::{norm2, Scalar};
use crate::solution::FbsdeSolution;
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree};

/// Singular values at or below `RANK_THRESHOLD · σ_max` count as zero.
pub const RANK_THRESHOLD: f64 = 1e-10;
/// Relative least-squares residual above which the system is inconsistent.
const CONSISTENCY_THRESHOLD: f64 = 1e-8;

#[derive(Debug, Clone)]
pub enum LinearVerdict<T> {
    Unique(Box<FbsdeSolution<T>>),
    NoSolution { rank: usize, unknowns: usize, residual: T },
    InfinitelyMany { rank: usize, unknowns: usize },
}

impl<T> LinearVerdict<T> {
    pub fn is_unique(&self) -> bool {
        matches!(self, LinearVerdict::Unique(_))
    }
}

/// Column layout of the unknowns `(X on depths 1..T, Y everywhere, ZĨ below T)`.
struct Layout {
    n: usize,
    horizon: usize,
    y_base: usize,
    z_base: usize,
    size: usize,
}

impl Layout {
    fn new<T: Scalar>(tree: &ScenarioTree<T>) -> Self {
        let n = tree.branching();
        let h = tree.horizon();
        let xs = tree.node_count(1, h);
        let ys = tree.node_count(0, h);
        let zs = (n - 1) * tree.node_count(0, h - 1);
        Self { n, horizon: h, y_base: xs, z_base: xs + ys, size: xs + ys + zs }
    }

    fn offset(&self, from: usize, depth: usize) -> usize {
        (from..depth).map(|t| self.n.pow(t as u32)).sum()
    }

    fn x(&self, node: NodeId) -> Option<usize> {
        (node.depth > 0).then(|| self.offset(1, node.depth) + node.index)
    }

    fn y(&self, node: NodeId) -> usize {
        self.y_base + self.offset(0, node.depth) + node.index
    }

    fn z(&self, node: NodeId, k: usize) -> Option<usize> {
        (node.depth < self.horizon).then(|| self.z_base + (self.offset(0, node.depth) + node.index) * (self.n - 1) + k)
    }
}

/// Assembles every per-branch forward and backward equation plus the
/// terminal condition into one square system and classifies it by rank.
pub fn linear_oracle<T: Scalar>(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>, x0: T) -> Result<LinearVerdict<T>> {
    coeffs.validate(tree)?;
    let layout = Layout::new(tree);
    let (n, h) = (layout.n, layout.horizon);
    let size = layout.size;
    let mut a = Matrix::zeros(size, size);
    let mut rhs = vec![T::zero(); size];
    let mut row = 0;
    let one = T::one();

    // coefficient of X at `node`, folding the known root value into the rhs
    let put_x = |a: &mut Matrix<T>, rhs: &mut [T], row: usize, node: NodeId, c: T| match layout.x(node) {
        Some(col) => a[(row, col)] = a[(row, col)] + c,
        None => rhs[row] = rhs[row] - c * x0,
    };

    for t in 0..h {
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let at = |p: &AdaptedProcess<T>| *p.at(node).expect("validated");
            let (a_, b_, d_) = (at(&coeffs.drift_x), at(&coeffs.drift_y), at(&coeffs.drift_const));
            let c_ = coeffs.drift_z.at(node)?;
            let (abar, bbar, dbar) = (coeffs.vol_x.at(node)?, coeffs.vol_y.at(node)?, coeffs.vol_const.at(node)?);
            let cbar = coeffs.vol_z.at(node)?;
            let centered = |v: &[T], i: usize| v[i] - v.iter().zip(probs).fold(T::zero(), |s, (&x, &p)| s + x * p);
            for i in 0..n {
                let child = tree.child(node, i);
                // X_c − (1 + A + Ā(e_i − P)) X − (B + B̄(e_i − P)) Y − Σ_k z̃_k (C_k + C̄_k(e_i − P)) = D + D̄(e_i − P)
                put_x(&mut a, &mut rhs, row, child, one);
                put_x(&mut a, &mut rhs, row, node, -(one + a_ + centered(abar, i)));
                let yc = layout.y(node);
                a[(row, yc)] = a[(row, yc)] - (b_ + centered(bbar, i));
                for k in 0..n - 1 {
                    let col = layout.z(node, k).expect("non-leaf");
                    let row_k: Vec<T> = (0..n).map(|j| cbar[(k, j)]).collect();
                    a[(row, col)] = a[(row, col)] - (c_[k] + centered(&row_k, i));
                }
                rhs[row] = rhs[row] + d_ + centered(dbar, i);
                row += 1;

                // Y_c − Y − Â X_c − B̂ Y_c − Ĉ·Z_c − Σ_k z̃_k (δ_ki − P_k) = D̂
                let cat = |p: &AdaptedProcess<T>| *p.at(child).expect("validated");
                let (ah, bh, dh) = (cat(&coeffs.gen_x), cat(&coeffs.gen_y), cat(&coeffs.gen_const));
                put_x(&mut a, &mut rhs, row, child, -ah);
                let ycc = layout.y(child);
                a[(row, ycc)] = a[(row, ycc)] + one - bh;
                a[(row, yc)] = a[(row, yc)] - one;
                if child.depth < h {
                    let ch = coeffs.gen_z.at(child)?;
                    for k in 0..n - 1 {
                        let col = layout.z(child, k).expect("non-leaf");
                        a[(row, col)] = a[(row, col)] - ch[k];
                    }
                }
                for k in 0..n - 1 {
                    let col = layout.z(node, k).expect("non-leaf");
                    let e = if k == i { one } else { T::zero() };
                    a[(row, col)] = a[(row, col)] - (e - probs[k]);
                }
                rhs[row] = rhs[row] + dh;
                row += 1;
            }
        }
    }
    for leaf in tree.leaves() {
        // Y_T − G X_T = g
        let yc = layout.y(leaf);
        a[(row, yc)] = one;
        put_x(&mut a, &mut rhs, row, leaf, -*coeffs.terminal_slope.at(leaf)?);
        rhs[row] = rhs[row] + *coeffs.terminal_offset.at(leaf)?;
        row += 1;
    }
    debug_assert_eq!(row, size);

    let svd = a.svd();
    let rel = T::tol(RANK_THRESHOLD);
    let rank = svd.rank(rel);
    let sol = svd.solve(&rhs, rel);
    let back = a.mul_vec(&sol);
    let miss: Vec<T> = back.iter().zip(&rhs).map(|(&u, &v)| u - v).collect();
    let residual = norm2(&miss);
    if rank < size {
        let scale = T::one().max(norm2(&rhs));
        if residual > T::tol(CONSISTENCY_THRESHOLD) * scale {
            return Ok(LinearVerdict::NoSolution { rank, unknowns: size, residual });
        }
        return Ok(LinearVerdict::InfinitelyMany { rank, unknowns: size });
    }

    let x = AdaptedProcess::from_fn(tree, 0, h, |node| layout.x(node).map_or(x0, |c| sol[c]));
    let y = AdaptedProcess::from_fn(tree, 0, h, |node| sol[layout.y(node)]);
    let z = AdaptedProcess::from_fn(tree, 0, h - 1, |node| {
        ZRow::from_tilde(&(0..n - 1).map(|k| sol[layout.z(node, k).expect("non-leaf")]).collect::<Vec<_>>())
    });
    let residuals = linear_residual(tree, coeffs, &x, &y, &z)?;
    Ok(LinearVerdict::Unique(Box::new(FbsdeSolution { x, y, z, residuals })))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn singular(tree: &ScenarioTree<f64>) -> LinearCoefficients<f64> {
        let mut c = LinearCoefficients::zeros(tree);
        c.drift_y = c.drift_y.map(|_, _| 1.0);
        c.terminal_slope = c.terminal_slope.map(|_, _| 1.0);
        c
    }

    #[test]
    fn classifies_singular_instance() {
        let tree = ScenarioTree::<f64>::uniform(2, 1).unwrap();
        assert!(matches!(linear_oracle(&tree, &singular(&tree), 1.0).unwrap(), LinearVerdict::NoSolution { .. }));
        assert!(matches!(linear_oracle(&tree, &singular(&tree), 0.0).unwrap(), LinearVerdict::InfinitelyMany { .. }));
    }

    #[test]
    fn unit_drift_is_unique() {
        let tree = ScenarioTree::<f64>::uniform(3, 2).unwrap();
        let mut c = LinearCoefficients::zeros(&tree);
        c.drift_const = c.drift_const.map(|_, _| 1.0);
        c.terminal_slope = c.terminal_slope.map(|_, _| 1.0);
        let LinearVerdict::Unique(s) = linear_oracle(&tree, &c, 0.0).unwrap() else { panic!("expected unique") };
        for (node, &x) in s.x.iter() {
            assert!((x - node.depth as f64).abs() < 1e-12);
        }
        assert!(s.y.iter().all(|(_, &y)| (y - 2.0).abs() < 1e-12));
        assert!(s.residuals.max() < 1e-12);
    }
}
