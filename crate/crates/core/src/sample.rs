//! Random instances for tests, fuzzing and demos. Every draw comes from the
//! caller's generator, so a seeded generator gives reproducible instances.

use rand::Rng;

use crate::linalg::Matrix;
use crate::linear::{LinearCoefficients, SpecialInputs};
use crate::nonlinear::Inhomogeneity;
use crate::scalar::Scalar;
use crate::tree::{AdaptedProcess, ScenarioTree, TransitionSpec};

fn uniform<T: Scalar, R: Rng + ?Sized>(rng: &mut R, bound: f64) -> T {
    T::lit(rng.gen_range(-bound..=bound))
}

/// A probability row of length `n` with every entry at least `floor`.
/// Requires `n · floor < 1`.
pub fn probability_row<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, floor: f64) -> Vec<T> {
    assert!(floor >= 0.0 && (n as f64) * floor < 1.0, "floor {floor} too large for {n} branches");
    let weights: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = weights.iter().sum();
    let free = 1.0 - n as f64 * floor;
    let mut row: Vec<f64> = weights.iter().map(|w| floor + free * w / total).collect();
    // push the rounding error into the largest entry
    let drift = 1.0 - row.iter().sum::<f64>();
    let big = (0..n).max_by(|&a, &b| row[a].total_cmp(&row[b])).expect("n ≥ 1");
    row[big] += drift;
    row.into_iter().map(T::lit).collect()
}

pub fn tree<T: Scalar, R: Rng + ?Sized>(rng: &mut R, branching: usize, horizon: usize, floor: f64) -> ScenarioTree<T> {
    let interior = (0..horizon).map(|t| branching.pow(t as u32)).sum();
    let rows = (0..interior).map(|_| probability_row(rng, branching, floor)).collect();
    ScenarioTree::new(branching, horizon, TransitionSpec::Table(rows)).expect("sampled rows are valid")
}

/// Scalars in `[−bound, bound]` on times `start..=end`.
pub fn process<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    tree: &ScenarioTree<T>,
    start: usize,
    end: usize,
    bound: f64,
) -> AdaptedProcess<T> {
    AdaptedProcess::from_fn(tree, start, end, |_| uniform(rng, bound))
}

/// Rows of `len` entries in `[−bound, bound]` on times `start..=end`.
pub fn row_process<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    tree: &ScenarioTree<T>,
    start: usize,
    end: usize,
    len: usize,
    bound: f64,
) -> AdaptedProcess<Vec<T>> {
    AdaptedProcess::from_fn(tree, start, end, |_| (0..len).map(|_| uniform(rng, bound)).collect())
}

/// A row with entries summing to zero: a draw minus its mean.
pub fn zero_sum_row<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, bound: f64) -> Vec<T> {
    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    let mean = raw.iter().sum::<f64>() / n as f64;
    let mut row: Vec<f64> = raw.iter().map(|v| v - mean).collect();
    let rest: f64 = row[..n - 1].iter().sum();
    row[n - 1] = -rest;
    row.into_iter().map(T::lit).collect()
}

/// Linear coefficients with entries of size at most `bound` that satisfy the
/// zero-column-sum conditions on `C`, `Ĉ` and `C̄`.
pub fn linear_coefficients<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    tree: &ScenarioTree<T>,
    bound: f64,
) -> LinearCoefficients<T> {
    let n = tree.branching();
    let h = tree.horizon();
    LinearCoefficients {
        drift_x: process(rng, tree, 0, h - 1, bound),
        drift_y: process(rng, tree, 0, h - 1, bound),
        drift_z: AdaptedProcess::from_fn(tree, 0, h - 1, |_| zero_sum_row(rng, n, bound)),
        drift_const: process(rng, tree, 0, h - 1, bound),
        vol_x: row_process(rng, tree, 0, h - 1, n, bound),
        vol_y: row_process(rng, tree, 0, h - 1, n, bound),
        vol_z: AdaptedProcess::from_fn(tree, 0, h - 1, |_| {
            let columns: Vec<Vec<T>> = (0..n).map(|_| zero_sum_row(rng, n, bound)).collect();
            Matrix::from_fn(n, n, |r, c| columns[c][r])
        }),
        vol_const: row_process(rng, tree, 0, h - 1, n, bound),
        gen_x: process(rng, tree, 1, h, bound),
        gen_y: process(rng, tree, 1, h, bound),
        gen_z: AdaptedProcess::from_fn(tree, 1, h, |node| {
            if node.depth == h {
                vec![T::zero(); n]
            } else {
                zero_sum_row(rng, n, bound)
            }
        }),
        gen_const: process(rng, tree, 1, h, bound),
        terminal_slope: process(rng, tree, h, h, bound),
        terminal_offset: process(rng, tree, h, h, bound),
    }
}

pub fn special_inputs<T: Scalar, R: Rng + ?Sized>(rng: &mut R, tree: &ScenarioTree<T>, bound: f64) -> SpecialInputs<T> {
    let h = tree.horizon();
    SpecialInputs {
        drift_const: process(rng, tree, 0, h - 1, bound),
        vol_const: row_process(rng, tree, 0, h - 1, tree.branching(), bound),
        gen_const: process(rng, tree, 1, h, bound),
        terminal_offset: process(rng, tree, h, h, bound),
    }
}

pub fn inhomogeneity<T: Scalar, R: Rng + ?Sized>(rng: &mut R, tree: &ScenarioTree<T>, bound: f64) -> Inhomogeneity<T> {
    let s = special_inputs(rng, tree, bound);
    Inhomogeneity { drift: s.drift_const, vol: s.vol_const, generator: s.gen_const, terminal: s.terminal_offset }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rows_respect_floor_and_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..6 {
            let row: Vec<f64> = probability_row(&mut rng, n, 0.1);
            assert!(row.iter().all(|&p| p >= 0.1 - 1e-15));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn sampled_coefficients_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in 2..5 {
            let tree: ScenarioTree<f64> = tree(&mut rng, n, 3, 0.05);
            linear_coefficients(&mut rng, &tree, 1.0).validate(&tree).unwrap();
        }
    }
}
