use crate::error::Result;
use crate::linalg::{Lu, Matrix};
use crate::scalar::{dot, Scalar};
use crate::tree::{AdaptedProcess, NodeId, ScenarioTree};

use super::{script_coeffs, LinearCoefficients};

/// `Γ` counts as singular when `σ_min ≤ SINGULARITY_THRESHOLD · σ_max`.
pub const SINGULARITY_THRESHOLD: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaVerdict<T> {
    /// `condition` is `σ_max / σ_min`.
    Invertible { condition: T },
    /// `ratio` is `σ_min / σ_max` (zero for the zero matrix).
    Singular { ratio: T },
}

impl<T> GammaVerdict<T> {
    pub fn is_singular(&self) -> bool {
        matches!(self, GammaVerdict::Singular { .. })
    }
}

/// Output of the backward recursion.
///
/// `slope` and `offset` cover `[first, T]`, where `first` is 1 when every `Γ`
/// is invertible and one past the singular level otherwise. `verdicts` covers
/// the levels that were examined, down to and including the first singular one.
#[derive(Debug, Clone)]
pub struct RiccatiData<T> {
    pub slope: AdaptedProcess<T>,
    pub offset: AdaptedProcess<T>,
    pub gamma: AdaptedProcess<Matrix<T>>,
    pub verdicts: AdaptedProcess<GammaVerdict<T>>,
    /// Nodes of the first singular level whose `Γ` is singular.
    pub singular: Vec<NodeId>,
}

impl<T: Scalar> RiccatiData<T> {
    pub fn is_solvable(&self) -> bool {
        self.singular.is_empty()
    }
}

/// Per-node pieces of the slope pass that the offset pass and the forward
/// sweep reuse.
#[derive(Debug, Clone)]
pub(crate) struct NodeGain<T> {
    pub lu: Lu<T>,
    /// `ℬ Pᵀ + 𝒞`
    pub coupling: Matrix<T>,
    /// `Γ⁻¹ 𝒜`
    pub u: Vec<T>,
    /// `(1 − B̂) P − Ĉ`, only used above the root.
    pub theta: Vec<T>,
}

/// Everything that depends on the homogeneous coefficients only.
#[derive(Debug, Clone)]
pub(crate) struct SlopePass<T> {
    pub slope: AdaptedProcess<T>,
    pub gamma: AdaptedProcess<Matrix<T>>,
    pub verdicts: AdaptedProcess<GammaVerdict<T>>,
    pub singular: Vec<NodeId>,
    /// `None` at singular nodes.
    pub gains: AdaptedProcess<Option<NodeGain<T>>>,
    /// `1 − B̂_T` at leaves.
    pub leaf_factor: AdaptedProcess<T>,
    /// `G` at leaves.
    pub terminal_slope: AdaptedProcess<T>,
}

/// The inhomogeneous data `D`, `D̄`, `D̂`, `g`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Forcing<'a, T> {
    pub drift_const: &'a AdaptedProcess<T>,
    pub vol_const: &'a AdaptedProcess<Vec<T>>,
    pub gen_const: &'a AdaptedProcess<T>,
    pub terminal_offset: &'a AdaptedProcess<T>,
}

impl<'a, T> Forcing<'a, T> {
    pub fn of(coeffs: &'a LinearCoefficients<T>) -> Self {
        Self {
            drift_const: &coeffs.drift_const,
            vol_const: &coeffs.vol_const,
            gen_const: &coeffs.gen_const,
            terminal_offset: &coeffs.terminal_offset,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct OffsetPass<T> {
    pub offset: AdaptedProcess<T>,
    /// `Γ⁻¹((ℬPᵀ + 𝒞) p + 𝒟)`, `None` at singular nodes.
    pub shifts: AdaptedProcess<Option<Vec<T>>>,
}

fn verdict<T: Scalar>(gamma: &Matrix<T>) -> GammaVerdict<T> {
    let svd = gamma.svd();
    let (hi, lo) = (svd.max_singular(), svd.min_singular());
    if hi == T::zero() || !(lo > T::tol(SINGULARITY_THRESHOLD) * hi) {
        let ratio = if hi > T::zero() { lo / hi } else { T::zero() };
        GammaVerdict::Singular { ratio }
    } else {
        GammaVerdict::Invertible { condition: hi / lo }
    }
}

pub(crate) fn slope_pass<T: Scalar>(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>) -> Result<SlopePass<T>> {
    let h = tree.horizon();
    let n = tree.branching();
    let one = T::one();
    let leaf_factor = coeffs.gen_y.map(|_, &b| one - b);
    let leaf_factor = AdaptedProcess::try_from_fn(tree, h, h, |leaf| leaf_factor.at(leaf).copied())?;
    let terminal_slope = coeffs.terminal_slope.clone();

    let mut slope_levels = vec![tree
        .leaves()
        .map(|leaf| -> Result<T> {
            Ok(-*coeffs.gen_x.at(leaf)? + *leaf_factor.at(leaf)? * *terminal_slope.at(leaf)?)
        })
        .collect::<Result<Vec<T>>>()?];
    let mut gamma_levels = Vec::new();
    let mut verdict_levels = Vec::new();
    let mut gain_levels = Vec::new();
    let mut singular = Vec::new();

    for t in (0..h).rev() {
        let next = slope_levels.last().expect("leaf level");
        let mut gammas = Vec::with_capacity(tree.level_size(t));
        let mut verdicts = Vec::with_capacity(tree.level_size(t));
        let mut gains = Vec::with_capacity(tree.level_size(t));
        for node in tree.nodes(t) {
            let probs = tree.transition(node)?;
            let s = script_coeffs(tree, coeffs, node)?;
            let child_slope = &next[node.index * n..(node.index + 1) * n];
            let coupling = Matrix::from_fn(n, n, |i, j| s.b[i] * probs[j] + s.c[(i, j)]);
            let gamma = Matrix::from_fn(n, n, |i, j| {
                let diag = if i == j { one } else { T::zero() };
                diag - coupling[(i, j)] * child_slope[j]
            });
            let v = verdict(&gamma);
            let gain = match (&v, gamma.lu()) {
                (GammaVerdict::Invertible { .. }, Some(lu)) => {
                    let u = lu.solve(&s.a);
                    let theta = if t > 0 {
                        let b_hat = *coeffs.gen_y.at(node)?;
                        let c_hat = coeffs.gen_z.at(node)?;
                        probs.iter().zip(c_hat).map(|(&p, &c)| (one - b_hat) * p - c).collect()
                    } else {
                        Vec::new()
                    };
                    Some(NodeGain { lu, coupling, u, theta })
                }
                _ => {
                    singular.push(node);
                    None
                }
            };
            gammas.push(gamma);
            verdicts.push(if gain.is_none() && !v.is_singular() { GammaVerdict::Singular { ratio: T::zero() } } else { v });
            gains.push(gain);
        }
        gamma_levels.push(gammas);
        verdict_levels.push(verdicts);
        if !singular.is_empty() || t == 0 {
            gain_levels.push(gains);
            break;
        }
        let level = gains
            .iter()
            .zip(tree.nodes(t))
            .map(|(gain, node)| -> Result<T> {
                let gain = gain.as_ref().expect("invertible level");
                let child_slope = &next[node.index * n..(node.index + 1) * n];
                let weighted: Vec<T> = child_slope.iter().zip(&gain.u).map(|(&p, &u)| p * u).collect();
                Ok(-*coeffs.gen_x.at(node)? + dot(&gain.theta, &weighted))
            })
            .collect::<Result<Vec<T>>>()?;
        gain_levels.push(gains);
        slope_levels.push(level);
    }

    let stop = h - gamma_levels.len();
    let first = h + 1 - slope_levels.len();
    slope_levels.reverse();
    gamma_levels.reverse();
    verdict_levels.reverse();
    gain_levels.reverse();
    Ok(SlopePass {
        slope: AdaptedProcess::new(tree, first, slope_levels)?,
        gamma: AdaptedProcess::new(tree, stop, gamma_levels)?,
        verdicts: AdaptedProcess::new(tree, stop, verdict_levels)?,
        singular,
        gains: AdaptedProcess::new(tree, stop, gain_levels)?,
        leaf_factor,
        terminal_slope,
    })
}

pub(crate) fn offset_pass<T: Scalar>(tree: &ScenarioTree<T>, slope: &SlopePass<T>, forcing: Forcing<'_, T>) -> Result<OffsetPass<T>> {
    let h = tree.horizon();
    let n = tree.branching();
    let first = slope.slope.start();
    let stop = slope.gains.start();

    let mut offset_levels = vec![tree
        .leaves()
        .map(|leaf| -> Result<T> {
            Ok(*slope.leaf_factor.at(leaf)? * *forcing.terminal_offset.at(leaf)? - *forcing.gen_const.at(leaf)?)
        })
        .collect::<Result<Vec<T>>>()?];
    let mut shift_levels = Vec::new();

    for t in (stop..h).rev() {
        let next_offset = offset_levels.last().expect("leaf level");
        let next_slope = slope.slope.level(t + 1).expect("slope covers t+1");
        let mut shifts = Vec::with_capacity(tree.level_size(t));
        for node in tree.nodes(t) {
            let Some(gain) = slope.gains.at(node)? else {
                shifts.push(None);
                continue;
            };
            let probs = tree.transition(node)?;
            let child_offset = &next_offset[node.index * n..(node.index + 1) * n];
            let drift = *forcing.drift_const.at(node)?;
            let vol = forcing.vol_const.at(node)?;
            let vol_mean = dot(vol, probs);
            let coupled = gain.coupling.mul_vec(child_offset);
            let rhs: Vec<T> = (0..n).map(|i| coupled[i] + drift + vol[i] - vol_mean).collect();
            shifts.push(Some(gain.lu.solve(&rhs)));
        }
        if t >= first {
            let level = tree
                .nodes(t)
                .zip(&shifts)
                .map(|(node, shift)| -> Result<T> {
                    let gain = slope.gains.at(node)?.as_ref().expect("invertible level");
                    let shift = shift.as_ref().expect("invertible level");
                    let base = node.index * n;
                    let lam: Vec<T> =
                        (0..n).map(|i| next_slope[base + i] * shift[i] + next_offset[base + i]).collect();
                    Ok(dot(&gain.theta, &lam) - *forcing.gen_const.at(node)?)
                })
                .collect::<Result<Vec<T>>>()?;
            offset_levels.push(level);
        }
        shift_levels.push(shifts);
    }
    debug_assert_eq!(offset_levels.len(), h + 1 - first);
    offset_levels.reverse();
    shift_levels.reverse();
    Ok(OffsetPass {
        offset: AdaptedProcess::new(tree, first, offset_levels)?,
        shifts: AdaptedProcess::new(tree, stop, shift_levels)?,
    })
}

/// Runs the slope and offset recursions and collects the certificate.
pub fn riccati_backward<T: Scalar>(tree: &ScenarioTree<T>, coeffs: &LinearCoefficients<T>) -> Result<RiccatiData<T>> {
    coeffs.validate(tree)?;
    let slope = slope_pass(tree, coeffs)?;
    let offset = offset_pass(tree, &slope, Forcing::of(coeffs))?;
    Ok(assemble(slope, offset.offset))
}

pub(crate) fn assemble<T: Scalar>(slope: SlopePass<T>, offset: AdaptedProcess<T>) -> RiccatiData<T> {
    RiccatiData { slope: slope.slope, offset, gamma: slope.gamma, verdicts: slope.verdicts, singular: slope.singular }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_with_unit_slope(tree: &ScenarioTree<f64>) -> LinearCoefficients<f64> {
        let mut c = LinearCoefficients::zeros(tree);
        c.terminal_slope = c.terminal_slope.map(|_, _| 1.0);
        c
    }

    #[test]
    fn zero_coefficients_give_unit_slope() {
        let tree = ScenarioTree::<f64>::uniform(3, 3).unwrap();
        let r = riccati_backward(&tree, &zero_with_unit_slope(&tree)).unwrap();
        assert!(r.is_solvable());
        assert_eq!(r.slope.start(), 1);
        for (_, &p) in r.slope.iter() {
            assert!((p - 1.0).abs() < 1e-14);
        }
        for (_, &p) in r.offset.iter() {
            assert_eq!(p, 0.0);
        }
        assert_eq!(r.verdicts.start(), 0);
    }

    #[test]
    fn singular_root() {
        let tree = ScenarioTree::<f64>::uniform(2, 1).unwrap();
        let mut c = zero_with_unit_slope(&tree);
        c.drift_y = c.drift_y.map(|_, _| 1.0);
        let r = riccati_backward(&tree, &c).unwrap();
        assert_eq!(r.singular, vec![NodeId::ROOT]);
        assert_eq!(r.slope.level(1).unwrap(), &[1.0, 1.0]);
        assert!(r.verdicts.at(NodeId::ROOT).unwrap().is_singular());
        // Γ₀ = I − 1Pᵀ
        let g = r.gamma.at(NodeId::ROOT).unwrap();
        assert_eq!(g, &Matrix::from_rows(&[vec![0.5, -0.5], vec![-0.5, 0.5]]));
    }

    #[test]
    fn singular_interior_level_halts_recursion() {
        let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
        let mut c = zero_with_unit_slope(&tree);
        c.drift_y = AdaptedProcess::from_fn(&tree, 0, 1, |n| if n == NodeId::new(1, 1) { 1.0 } else { 0.0 });
        let r = riccati_backward(&tree, &c).unwrap();
        assert_eq!(r.singular, vec![NodeId::new(1, 1)]);
        assert_eq!(r.slope.start(), 2);
        assert_eq!(r.offset.start(), 2);
        assert_eq!(r.verdicts.start(), 1);
        assert!(!r.verdicts.at(NodeId::new(1, 0)).unwrap().is_singular());
    }
}
