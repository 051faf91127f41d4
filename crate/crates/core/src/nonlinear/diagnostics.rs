//! Sampled checks of the Lipschitz and monotonicity assumptions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::martingale::{cond_second_moment, ZRow};
use crate::scalar::{dot, norm2, Scalar};
use crate::tree::{NodeId, ScenarioTree};

use super::NonlinearProblem;

/// Sample points are drawn from `[−SAMPLE_RADIUS, SAMPLE_RADIUS]` per coordinate.
pub const SAMPLE_RADIUS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Clause {
    Lipschitz,
    /// `⟨A(t,λ) − A(t,λ'), λ − λ'⟩ ≤ −c₂|λ − λ'|²` for `1 ≤ t ≤ T−1`.
    MonotoneInterior,
    /// The `t = 0` clause, pairing only `y` and `z`.
    MonotoneInitial,
    /// `⟨−f(T,·) + f(T,·'), x − x'⟩ ≤ −c₂|x − x'|²`.
    MonotoneTerminal,
    /// `⟨h(x) − h(x'), x − x'⟩ ≥ c₂|x − x'|²`.
    TerminalIncreasing,
    Finite,
}

impl Clause {
    pub fn name(&self) -> &'static str {
        match self {
            Clause::Lipschitz => "lipschitz",
            Clause::MonotoneInterior => "monotone (interior)",
            Clause::MonotoneInitial => "monotone (t = 0)",
            Clause::MonotoneTerminal => "monotone (t = T)",
            Clause::TerminalIncreasing => "terminal monotone",
            Clause::Finite => "finite values",
        }
    }
}

/// Pair of sample points `(x, y, z̃)` with the ratio they produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Witness<T> {
    pub node: NodeId,
    pub first: (T, T, Vec<T>),
    pub second: (T, T, Vec<T>),
    pub ratio: T,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Verdict<T> {
    SatisfiedOnSamples,
    Violated { clause: Clause, witness: Witness<T> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport<T> {
    pub samples: usize,
    /// Largest `|A(λ) − A(λ')| / |λ − λ'|`, also covering `h` and `f(T, ·)`.
    pub lipschitz: T,
    /// Largest interior monotonicity ratio; `None` when `T = 1`.
    pub monotone_interior: Option<T>,
    pub monotone_initial: T,
    pub monotone_terminal: T,
    /// Smallest `⟨h(x) − h(x'), x − x'⟩ / |x − x'|²`.
    pub terminal_increasing: T,
    pub verdict: Verdict<T>,
}

impl<T: Scalar> AssumptionReport<T> {
    pub fn satisfied(&self) -> bool {
        matches!(self.verdict, Verdict::SatisfiedOnSamples)
    }
}

type Point<T> = (T, T, Vec<T>);

struct Tracker<T> {
    value: T,
    witness: Option<Witness<T>>,
    larger: bool,
}

impl<T: Scalar> Tracker<T> {
    fn new(larger: bool) -> Self {
        Self { value: if larger { T::neg_infinity() } else { T::infinity() }, witness: None, larger }
    }

    fn offer(&mut self, ratio: T, node: NodeId, a: &Point<T>, b: &Point<T>) {
        let better = if self.larger { ratio > self.value } else { ratio < self.value };
        if better || self.witness.is_none() {
            self.value = ratio;
            self.witness = Some(Witness { node, first: a.clone(), second: b.clone(), ratio });
        }
    }
}

/// `|λ| = |x| + |y| + |zĨ|`
fn size<T: Scalar>(dx: T, dy: T, dz: &[T]) -> T {
    dx.abs() + dy.abs() + norm2(dz)
}

fn diff<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    a.iter().zip(b).map(|(&u, &v)| u - v).collect()
}

/// Draws pairs of points on every level (random pairs and single-coordinate
/// moves) and evaluates each clause of the assumptions on them. The `t = 0`
/// clause is sampled with a common `x`, since `X_0` is fixed, and the `t = T`
/// clause on the graph `y = h(x)`, the only pairs a solution can reach.
pub fn check_assumptions<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    samples: usize,
    seed: u64,
) -> AssumptionReport<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = tree.horizon();
    let n = tree.branching();
    let radius = T::lit(SAMPLE_RADIUS);
    let draw = |rng: &mut ChaCha8Rng| T::lit(rng.gen_range(-1.0..1.0)) * radius;
    let samples = samples.max(2);

    let mut lipschitz = Tracker::new(true);
    let mut interior = Tracker::new(true);
    let mut initial = Tracker::new(true);
    let mut terminal = Tracker::new(true);
    let mut increasing = Tracker::new(false);
    let mut non_finite: Option<Witness<T>> = None;

    for s in 0..samples {
        let t = rng.gen_range(0..=h);
        let node = NodeId::new(t, rng.gen_range(0..tree.level_size(t)));
        let a: Point<T> = (draw(&mut rng), draw(&mut rng), (0..n - 1).map(|_| draw(&mut rng)).collect());
        let mut b: Point<T> = (draw(&mut rng), draw(&mut rng), (0..n - 1).map(|_| draw(&mut rng)).collect());
        // every other sample moves a single coordinate
        if s % 2 == 1 {
            let axis = rng.gen_range(0..n + 1);
            b = a.clone();
            let step = draw(&mut rng);
            match axis {
                0 => b.0 = b.0 + step,
                1 => b.1 = b.1 + step,
                k => b.2[k - 2] = b.2[k - 2] + step,
            }
        }

        if t == h {
            let (ha, hb) = ((problem.terminal)(node, a.0), (problem.terminal)(node, b.0));
            let fa = (problem.terminal_generator)(node, a.0, a.1);
            let fb = (problem.terminal_generator)(node, b.0, b.1);
            if !(ha.is_finite() && hb.is_finite() && fa.is_finite() && fb.is_finite()) {
                non_finite.get_or_insert(Witness { node, first: a.clone(), second: b.clone(), ratio: T::nan() });
                continue;
            }
            let dx = a.0 - b.0;
            if dx != T::zero() {
                lipschitz.offer((ha - hb).abs() / dx.abs(), node, &a, &b);
                increasing.offer((ha - hb) * dx / (dx * dx), node, &a, &b);
            }
            let dxy = dx.abs() + (a.1 - b.1).abs();
            if dxy > T::zero() {
                lipschitz.offer((fa - fb).abs() / dxy, node, &a, &b);
            }
            let on_graph = |p: &Point<T>| (p.0, (problem.terminal)(node, p.0), p.2.clone());
            let (ga, gb) = (on_graph(&a), on_graph(&b));
            let fga = (problem.terminal_generator)(node, ga.0, ga.1);
            let fgb = (problem.terminal_generator)(node, gb.0, gb.1);
            if dx != T::zero() && fga.is_finite() && fgb.is_finite() {
                terminal.offer((fgb - fga) * dx / (dx * dx), node, &ga, &gb);
            }
            continue;
        }

        let second = cond_second_moment(tree, node).expect("non-leaf node");
        let eval = |p: &Point<T>| {
            let f = if t == 0 { T::zero() } else { (problem.generator)(t, node, p.0, p.1, &p.2) };
            let b = (problem.drift)(t, node, p.0, p.1, &p.2);
            let sigma = (problem.vol)(t, node, p.0, p.1, &p.2);
            (f, b, sigma)
        };
        let (fa, ba, sa) = eval(&a);
        let (fb, bb, sb) = eval(&b);
        let finite = fa.is_finite() && fb.is_finite() && ba.is_finite() && bb.is_finite()
            && sa.len() == n && sb.len() == n && sa.iter().chain(&sb).all(|v| v.is_finite());
        if !finite {
            non_finite.get_or_insert(Witness { node, first: a.clone(), second: b.clone(), ratio: T::nan() });
            continue;
        }
        let dsig = second.transpose().mul_vec(&diff(&sa, &sb));
        let (dx, dy, dz) = (a.0 - b.0, a.1 - b.1, diff(&a.2, &b.2));
        let dz_row = ZRow::from_tilde(&dz).0;
        let norm = size(dx, dy, &dz);
        if norm > T::zero() {
            let da = (fa - fb).abs() + (ba - bb).abs() + norm2(&dsig);
            lipschitz.offer(da / norm, node, &a, &b);
            if t > 0 {
                let pairing = -(fa - fb) * dx + (ba - bb) * dy + dot(&dsig, &dz_row);
                interior.offer(pairing / (norm * norm), node, &a, &b);
            }
        }
        if t == 0 {
            // common x: X_0 is fixed
            let b0 = (a.0, b.1, b.2.clone());
            let (_, bb0, sb0) = eval(&b0);
            if bb0.is_finite() && sb0.iter().all(|v| v.is_finite()) {
                let dsig0 = second.transpose().mul_vec(&diff(&sa, &sb0));
                let denom = dy * dy + dot(&dz, &dz);
                if denom > T::zero() {
                    let pairing = (ba - bb0) * dy + dot(&dsig0, &dz_row);
                    initial.offer(pairing / denom, node, &a, &b0);
                }
            }
        }
    }

    let c1 = problem.lipschitz;
    let c2 = problem.monotonicity;
    let slack = T::lit(1e-9);
    let mut verdict = Verdict::SatisfiedOnSamples;
    let mut violate = |clause: Clause, w: &Option<Witness<T>>| {
        if let (Verdict::SatisfiedOnSamples, Some(w)) = (&verdict, w) {
            verdict = Verdict::Violated { clause, witness: w.clone() };
        }
    };
    if non_finite.is_some() {
        violate(Clause::Finite, &non_finite);
    }
    if let Some(c1) = c1 {
        if lipschitz.value > c1 * (T::one() + slack) {
            violate(Clause::Lipschitz, &lipschitz.witness);
        }
    }
    let bound = c2.map_or(T::zero(), |c| -c);
    let fails_upper = |v: T| if c2.is_some() { v > bound + slack } else { v >= T::zero() };
    if interior.witness.is_some() && fails_upper(interior.value) {
        violate(Clause::MonotoneInterior, &interior.witness);
    }
    if initial.witness.is_some() && fails_upper(initial.value) {
        violate(Clause::MonotoneInitial, &initial.witness);
    }
    if terminal.witness.is_some() && fails_upper(terminal.value) {
        violate(Clause::MonotoneTerminal, &terminal.witness);
    }
    let low = c2.unwrap_or(T::zero());
    if increasing.witness.is_some() && (if c2.is_some() { increasing.value < low - slack } else { increasing.value <= T::zero() }) {
        violate(Clause::TerminalIncreasing, &increasing.witness);
    }

    let finite_or_zero = |tr: &Tracker<T>| if tr.witness.is_some() { tr.value } else { T::zero() };
    AssumptionReport {
        samples,
        lipschitz: finite_or_zero(&lipschitz),
        monotone_interior: (h > 1 && interior.witness.is_some()).then_some(interior.value),
        monotone_initial: finite_or_zero(&initial),
        monotone_terminal: finite_or_zero(&terminal),
        terminal_increasing: finite_or_zero(&increasing),
        verdict,
    }
}
