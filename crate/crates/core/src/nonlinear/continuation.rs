use std::fmt;

use crate::error::{Error, Result};
use crate::linear::SpecialSolver;
use crate::martingale::ZRow;
use crate::scalar::Scalar;
use crate::solution::FbsdeSolution;
use crate::tree::{AdaptedProcess, ScenarioTree};

use super::{residual_with, Inhomogeneity, NonlinearProblem};

/// Smallest admissible step.
const MIN_STEP: f64 = 1.0 / (1u64 << 20) as f64;
/// Floor for the tolerance handed to nested levels.
const INNER_TOLERANCE_FLOOR: f64 = 1e-13;
/// Consecutive growing increments that count as divergence.
const GROWTH_LIMIT: usize = 4;
/// Consecutive iterations of the ¼–⅛ inequality that count as contraction.
const CONTRACTION_STREAK: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    #[default]
    Continuation,
    /// A single level with `δ = 1`.
    FlatPicard,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContinuationOptions {
    /// Initial step in `(0, 1]`; the ladder uses `1/⌈1/δ⌉`.
    pub delta: f64,
    pub tolerance: f64,
    /// Picard iterations per level run.
    pub max_iter: usize,
    pub max_halvings: usize,
    /// Cap on base-level linear solves across the whole run.
    pub max_inner_solves: usize,
    /// Cap on the number of ladder levels.
    pub max_depth: usize,
    pub mode: Mode,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self {
            delta: 0.25,
            tolerance: 1e-10,
            max_iter: 50,
            max_halvings: 8,
            max_inner_solves: 2_000_000,
            max_depth: 4096,
            mode: Mode::Continuation,
        }
    }
}

impl ContinuationOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::ShapeMismatch(format!("step {} outside (0, 1]", self.delta)));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::ShapeMismatch(format!("tolerance {} must be positive", self.tolerance)));
        }
        if self.max_iter == 0 {
            return Err(Error::ShapeMismatch("max_iter must be positive".into()));
        }
        Ok(())
    }

    fn steps(&self) -> usize {
        match self.mode {
            Mode::FlatPicard => 1,
            Mode::Continuation => (1.0 / self.delta - 1e-9).ceil().max(1.0) as usize,
        }
    }
}

/// Picard statistics of one ladder level `α = k/m`.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats<T> {
    pub alpha: T,
    /// Number of times the level was solved.
    pub runs: usize,
    pub iterations: usize,
    /// `E Σ_t |Λ̂_t|²` per iteration of the latest run.
    pub increments: Vec<T>,
    /// Runs in which the ¼–⅛ inequality held for three consecutive iterations.
    pub contraction_witnessed: usize,
    /// Runs that failed after such a witness.
    pub contraction_broken: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats<T> {
    /// Step of the final ladder.
    pub delta: T,
    /// Levels `k = 1..=m` of the final ladder.
    pub levels: Vec<LevelStats<T>>,
    pub halvings: usize,
    pub inner_solves: usize,
}

impl<T: Scalar> SolveStats<T> {
    fn new(m: usize) -> Self {
        let mf = T::from_usize(m).expect("level count");
        Self {
            delta: T::one() / mf,
            levels: (1..=m)
                .map(|k| LevelStats {
                    alpha: T::from_usize(k).expect("level") / mf,
                    runs: 0,
                    iterations: 0,
                    increments: Vec::new(),
                    contraction_witnessed: 0,
                    contraction_broken: 0,
                })
                .collect(),
            halvings: 0,
            inner_solves: 0,
        }
    }

    pub fn iterations(&self) -> usize {
        self.levels.iter().map(|l| l.iterations).sum()
    }

    pub fn contraction_witnessed(&self) -> usize {
        self.levels.iter().map(|l| l.contraction_witnessed).sum()
    }

    pub fn contraction_broken(&self) -> usize {
        self.levels.iter().map(|l| l.contraction_broken).sum()
    }
}

#[derive(Debug, Clone)]
pub struct NonlinearSolve<T> {
    pub solution: FbsdeSolution<T>,
    pub stats: SolveStats<T>,
}

#[derive(Debug, Clone)]
pub enum SolveFailure<T> {
    /// Picard increments at level `alpha` did not settle within the budget.
    NoContraction { alpha: T, iterations: usize },
    /// The step fell below `2⁻²⁰` or the halving budget ran out.
    StepUnderflow { delta: T, best: Option<Box<FbsdeSolution<T>>> },
    NonFiniteIterate { alpha: T },
    DepthExceeded { depth: usize, limit: usize },
    /// The cap on base-level solves was hit.
    BudgetExhausted { inner_solves: usize, best: Option<Box<FbsdeSolution<T>>> },
    Invalid(Error),
}

#[derive(Debug, Clone)]
pub struct SolveError<T> {
    pub failure: SolveFailure<T>,
    pub stats: SolveStats<T>,
}

impl<T: Scalar> SolveError<T> {
    /// Best top-level iterate seen, when one was kept.
    pub fn best(&self) -> Option<&FbsdeSolution<T>> {
        match &self.failure {
            SolveFailure::StepUnderflow { best, .. } | SolveFailure::BudgetExhausted { best, .. } => best.as_deref(),
            _ => None,
        }
    }
}

impl<T: Scalar> fmt::Display for SolveError<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.failure {
            SolveFailure::NoContraction { alpha, iterations } => {
                write!(f, "no contraction at alpha = {alpha} after {iterations} iterations; try continuation mode or a smaller step")
            }
            SolveFailure::StepUnderflow { delta, best } => {
                write!(f, "step underflow at delta = {delta}")?;
                if let Some(b) = best {
                    write!(f, " (best residual {})", b.residuals.max())?;
                }
                Ok(())
            }
            SolveFailure::NonFiniteIterate { alpha } => write!(f, "non-finite iterate at alpha = {alpha}"),
            SolveFailure::DepthExceeded { depth, limit } => write!(f, "ladder depth {depth} exceeds limit {limit}"),
            SolveFailure::BudgetExhausted { inner_solves, .. } => {
                write!(f, "gave up after {inner_solves} inner linear solves")
            }
            SolveFailure::Invalid(e) => write!(f, "{e}"),
        }
    }
}

impl<T: Scalar> std::error::Error for SolveError<T> {}

enum Fail<T> {
    NoContraction { alpha: T, iterations: usize },
    NonFinite { alpha: T },
    Budget,
    Invalid(Error),
}

impl<T> From<Error> for Fail<T> {
    fn from(e: Error) -> Self {
        Fail::Invalid(e)
    }
}

fn zero_solution<T: Scalar>(tree: &ScenarioTree<T>) -> FbsdeSolution<T> {
    let h = tree.horizon();
    let n = tree.branching();
    FbsdeSolution {
        x: AdaptedProcess::from_fn(tree, 0, h, |_| T::zero()),
        y: AdaptedProcess::from_fn(tree, 0, h, |_| T::zero()),
        z: AdaptedProcess::from_fn(tree, 0, h - 1, |_| ZRow::zeros(n)),
        residuals: Default::default(),
    }
}

/// The nested solver: level `k` runs Picard on top of level `k − 1`, and
/// level 0 is the special linear equation.
struct Ladder<'a, T> {
    tree: &'a ScenarioTree<T>,
    problem: &'a NonlinearProblem<T>,
    special: &'a SpecialSolver<T>,
    blended: Vec<NonlinearProblem<T>>,
    m: usize,
    delta: T,
    tol: T,
    max_iter: usize,
    budget: usize,
    stats: SolveStats<T>,
    best: Option<FbsdeSolution<T>>,
}

impl<'a, T: Scalar> Ladder<'a, T> {
    fn new(
        tree: &'a ScenarioTree<T>,
        problem: &'a NonlinearProblem<T>,
        special: &'a SpecialSolver<T>,
        m: usize,
        opts: &ContinuationOptions,
        spent: usize,
    ) -> Result<Self> {
        let mf = T::from_usize(m).expect("level count");
        let blended = (0..=m)
            .map(|k| problem.blend(if k == m { T::one() } else { T::from_usize(k).expect("level") / mf }))
            .collect::<Result<Vec<_>>>()?;
        let mut stats = SolveStats::new(m);
        stats.inner_solves = spent;
        Ok(Self {
            tree,
            problem,
            special,
            blended,
            m,
            delta: T::one() / mf,
            tol: T::lit(opts.tolerance),
            max_iter: opts.max_iter,
            budget: opts.max_inner_solves,
            stats,
            best: None,
        })
    }

    fn tolerance(&self, k: usize) -> T {
        let floor = self.tol.min(T::lit(INNER_TOLERANCE_FLOOR));
        let quarter = T::lit(0.25);
        let mut tol = self.tol;
        for _ in k..self.m {
            tol = tol * quarter;
        }
        tol.max(floor)
    }

    /// Forcing of level `k − 1` that freezes the `δ`-part of level `k` at `current`.
    fn shift(&self, forcing: &Inhomogeneity<T>, current: &FbsdeSolution<T>) -> Inhomogeneity<T> {
        let tree = self.tree;
        let p = self.problem;
        let d = self.delta;
        let x = |node| *current.x.get(node).expect("full solution");
        let y = |node| *current.y.get(node).expect("full solution");
        let tilde = |node| current.z.get(node).expect("full solution").tilde_contract();
        Inhomogeneity {
            drift: forcing.drift.map(|node, &b0| b0 + d * (y(node) + (p.drift)(node.depth, node, x(node), y(node), &tilde(node)))),
            vol: forcing.vol.map(|node, s0| {
                let zt = tilde(node);
                let z = ZRow::from_tilde(&zt);
                let s = (p.vol)(node.depth, node, x(node), y(node), &zt);
                s0.iter().zip(s).zip(&z.0).map(|((&a, b), &c)| a + d * (c + b)).collect()
            }),
            generator: forcing.generator.map(|node, &f0| {
                let zt = (node.depth < tree.horizon()).then(|| tilde(node));
                let f = p.generator_at(tree, node, x(node), y(node), zt.as_deref());
                f0 + d * (f - x(node))
            }),
            terminal: forcing.terminal.map(|node, &h0| h0 + d * ((p.terminal)(node, x(node)) - x(node))),
        }
    }

    fn solve(&mut self, k: usize, forcing: &Inhomogeneity<T>, x0: T, init: Option<&FbsdeSolution<T>>) -> std::result::Result<FbsdeSolution<T>, Fail<T>> {
        if k == 0 {
            if self.stats.inner_solves >= self.budget {
                return Err(Fail::Budget);
            }
            self.stats.inner_solves += 1;
            return Ok(self.special.solve_unchecked(self.tree, &forcing.to_special(), x0)?);
        }
        let alpha = self.stats.levels[k - 1].alpha;
        let tol = self.tolerance(k);
        let mut current = init.cloned().unwrap_or_else(|| zero_solution(self.tree));
        {
            let level = &mut self.stats.levels[k - 1];
            level.runs += 1;
            level.increments.clear();
        }
        let mut streak = 0;
        let mut witnessed = false;
        let mut growth = 0;
        let outcome = loop {
            let iterations = self.stats.levels[k - 1].increments.len();
            if iterations >= self.max_iter {
                break Err(Fail::NoContraction { alpha, iterations });
            }
            let shifted = self.shift(forcing, &current);
            let mut next = match self.solve(k - 1, &shifted, x0, Some(&current)) {
                Ok(s) => s,
                Err(e) => break Err(e),
            };
            let inc = next.squared_distance(&current, self.tree);
            let level = &mut self.stats.levels[k - 1];
            level.iterations += 1;
            level.increments.push(inc);
            if !inc.is_finite() {
                break Err(Fail::NonFinite { alpha });
            }
            let incs = &level.increments;
            if let [.., older, prev, last] = incs[..] {
                if last <= T::lit(0.25) * prev + T::lit(0.125) * older {
                    streak += 1;
                    if streak >= CONTRACTION_STREAK && !witnessed {
                        witnessed = true;
                        level.contraction_witnessed += 1;
                    }
                } else {
                    streak = 0;
                }
            }
            if let [.., prev, last] = incs[..] {
                growth = if last > prev { growth + 1 } else { 0 };
            }
            let top = k == self.m;
            if inc <= tol * tol || top {
                let residuals = match residual_with(self.tree, &self.blended[k], Some(forcing), &next.x, &next.y, &next.z) {
                    Ok(r) => r,
                    Err(e) => break Err(e.into()),
                };
                next.residuals = residuals;
                if top && self.best.as_ref().is_none_or(|b| residuals.max() < b.residuals.max()) {
                    self.best = Some(next.clone());
                }
                if inc <= tol * tol && residuals.max() <= tol {
                    break Ok(next);
                }
            }
            if growth >= GROWTH_LIMIT || inc > T::lit(1e30) {
                break Err(Fail::NoContraction { alpha, iterations: iterations + 1 });
            }
            current = next;
        };
        if outcome.is_err() && witnessed {
            self.stats.levels[k - 1].contraction_broken += 1;
        }
        outcome
    }
}

/// Ladders deeper than this run on a dedicated thread sized for the recursion.
const INLINE_DEPTH: usize = 32;
const FRAME_BYTES: usize = 16 * 1024;

impl<T: Scalar> Ladder<'_, T> {
    fn solve_top(
        &mut self,
        forcing: &Inhomogeneity<T>,
        x0: T,
        init: Option<&FbsdeSolution<T>>,
    ) -> std::result::Result<FbsdeSolution<T>, Fail<T>> {
        let m = self.m;
        if m <= INLINE_DEPTH {
            return self.solve(m, forcing, x0, init);
        }
        std::thread::scope(|scope| {
            let handle = std::thread::Builder::new()
                .stack_size((m + 64) * FRAME_BYTES)
                .spawn_scoped(scope, || self.solve(m, forcing, x0, init))
                .expect("spawn solver thread");
            handle.join().unwrap_or_else(|panic| std::panic::resume_unwind(panic))
        })
    }
}

fn run<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    opts: &ContinuationOptions,
    init: Option<&FbsdeSolution<T>>,
) -> std::result::Result<NonlinearSolve<T>, SolveError<T>> {
    let invalid = |e: Error, m: usize| SolveError { failure: SolveFailure::Invalid(e), stats: SolveStats::new(m) };
    opts.validate().map_err(|e| invalid(e, 1))?;
    let mut m = opts.steps();
    if !x0.is_finite() {
        return Err(invalid(Error::NonFiniteInput("x0".into()), m));
    }
    let special = SpecialSolver::new(tree).map_err(|e| invalid(e, m))?;
    let zeros = Inhomogeneity::zeros(tree);
    let mut halvings = 0;
    let mut spent = 0;
    let mut best: Option<FbsdeSolution<T>> = None;
    loop {
        if m > opts.max_depth {
            let mut stats = SolveStats::new(1);
            stats.halvings = halvings;
            stats.inner_solves = spent;
            return Err(SolveError { failure: SolveFailure::DepthExceeded { depth: m, limit: opts.max_depth }, stats });
        }
        let mut ladder = Ladder::new(tree, problem, &special, m, opts, spent).map_err(|e| invalid(e, m))?;
        ladder.stats.halvings = halvings;
        let outcome = ladder.solve_top(&zeros, x0, init);
        spent = ladder.stats.inner_solves;
        if let Some(b) = ladder.best.take() {
            if best.as_ref().is_none_or(|old| b.residuals.max() < old.residuals.max()) {
                best = Some(b);
            }
        }
        let stats = ladder.stats;
        let failure = match outcome {
            Ok(solution) => return Ok(NonlinearSolve { solution, stats }),
            Err(Fail::NoContraction { alpha, iterations }) => {
                if opts.mode == Mode::FlatPicard {
                    SolveFailure::NoContraction { alpha, iterations }
                } else {
                    halvings += 1;
                    m *= 2;
                    if halvings > opts.max_halvings || 1.0 / (m as f64) < MIN_STEP {
                        let delta = T::one() / T::from_usize(m / 2).expect("level count");
                        SolveFailure::StepUnderflow { delta, best: best.map(Box::new) }
                    } else {
                        continue;
                    }
                }
            }
            Err(Fail::NonFinite { alpha }) => SolveFailure::NonFiniteIterate { alpha },
            Err(Fail::Budget) => SolveFailure::BudgetExhausted { inner_solves: spent, best: best.map(Box::new) },
            Err(Fail::Invalid(e)) => SolveFailure::Invalid(e),
        };
        let mut stats = stats;
        stats.halvings = halvings;
        return Err(SolveError { failure, stats });
    }
}

/// Solves the target equation (`α = 1`, no forcing) by continuation from
/// `Λ⁰ = 0`, halving the step whenever a level stops contracting.
pub fn solve_continuation<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    opts: &ContinuationOptions,
) -> std::result::Result<NonlinearSolve<T>, SolveError<T>> {
    let opts = ContinuationOptions { mode: Mode::Continuation, ..*opts };
    run(tree, problem, x0, &opts, None)
}

/// Like [`solve_continuation`] with the top-level Picard iteration started
/// from `init` instead of zero.
pub fn solve_continuation_from<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    opts: &ContinuationOptions,
    init: &FbsdeSolution<T>,
) -> std::result::Result<NonlinearSolve<T>, SolveError<T>> {
    let opts = ContinuationOptions { mode: Mode::Continuation, ..*opts };
    run(tree, problem, x0, &opts, Some(init))
}

/// One Picard level with the whole nonlinearity frozen (`δ = 1`). Carries no
/// convergence guarantee; failures surface as `NoContraction`.
pub fn solve_flat_picard<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    opts: &ContinuationOptions,
) -> std::result::Result<NonlinearSolve<T>, SolveError<T>> {
    let opts = ContinuationOptions { mode: Mode::FlatPicard, ..*opts };
    run(tree, problem, x0, &opts, None)
}

pub fn solve_nonlinear<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    x0: T,
    opts: &ContinuationOptions,
) -> std::result::Result<NonlinearSolve<T>, SolveError<T>> {
    run(tree, problem, x0, opts, None)
}

/// Solves the blended equation at `α` with the given forcing, using the
/// ladder of step `1/⌈1/δ⌉`; `α` must sit on that ladder.
pub fn solve_at_level<T: Scalar>(
    tree: &ScenarioTree<T>,
    problem: &NonlinearProblem<T>,
    alpha: T,
    forcing: &Inhomogeneity<T>,
    x0: T,
    opts: &ContinuationOptions,
) -> std::result::Result<NonlinearSolve<T>, SolveError<T>> {
    opts.validate().map_err(|e| SolveError { failure: SolveFailure::Invalid(e), stats: SolveStats::new(1) })?;
    let m = ContinuationOptions { mode: Mode::Continuation, ..*opts }.steps();
    let invalid = |e: Error| SolveError { failure: SolveFailure::Invalid(e), stats: SolveStats::new(m) };
    if !(alpha >= T::zero() && alpha <= T::one()) {
        return Err(invalid(Error::AlphaOutOfRange(alpha.as_f64())));
    }
    let scaled = alpha.as_f64() * m as f64;
    let k = scaled.round() as usize;
    if (scaled - k as f64).abs() > 1e-9 {
        return Err(invalid(Error::AlphaOutOfRange(alpha.as_f64())));
    }
    if k > opts.max_depth {
        return Err(SolveError { failure: SolveFailure::DepthExceeded { depth: k, limit: opts.max_depth }, stats: SolveStats::new(m) });
    }
    let special = SpecialSolver::new(tree).map_err(invalid)?;
    let mut ladder = Ladder::new(tree, problem, &special, m, opts, 0).map_err(invalid)?;
    // the level's own residual is checked against the requested tolerance
    ladder.m = k;
    let outcome = ladder.solve(k, forcing, x0, None);
    let mut stats = ladder.stats;
    stats.levels.truncate(k);
    match outcome {
        Ok(mut solution) => {
            if k == 0 {
                solution.residuals = residual_with(tree, &ladder.blended[0], Some(forcing), &solution.x, &solution.y, &solution.z)
                    .map_err(invalid)?;
            }
            Ok(NonlinearSolve { solution, stats })
        }
        Err(f) => {
            let failure = match f {
                Fail::NoContraction { alpha, iterations } => SolveFailure::NoContraction { alpha, iterations },
                Fail::NonFinite { alpha } => SolveFailure::NonFiniteIterate { alpha },
                Fail::Budget => SolveFailure::BudgetExhausted { inner_solves: stats.inner_solves, best: None },
                Fail::Invalid(e) => SolveFailure::Invalid(e),
            };
            Err(SolveError { failure, stats })
        }
    }
}
