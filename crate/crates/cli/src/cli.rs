//! Command-line front end.

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};
use fbsde_core::bsde::{bsde_residual, solve_bsde, BsdeProblem};
use fbsde_core::linear::{riccati_backward, solve_linear, GammaVerdict, LinearOutcome, RiccatiData, SpecialSolver};
use fbsde_core::nonlinear::{check_assumptions, solve_nonlinear, ContinuationOptions, Mode, SolveFailure, Verdict};
use fbsde_core::oracle::{linear_oracle, solve_oracle, LinearVerdict, NewtonOptions, OracleFailure};
use fbsde_core::{Coefficients, NodeId, Tree};

use crate::expr::Env;
use crate::problem::{branch_variable, load_problem, load_problem_str, node_label, Bound, LoadError, LoadedProblem, ModeName};
use crate::report::{
    records, records_of, Certificate, DiagnosticsReport, OracleReport, Report, RiccatiReport, StartSummary, StatsReport,
    Status,
};

pub const EXIT_SOLVED: i32 = 0;
pub const EXIT_UNSOLVABLE: i32 = 2;
pub const EXIT_NO_CONVERGENCE: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "fbsde", version, about = "Forward-backward stochastic difference equations on scenario trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Write the report here instead of standard output.
    #[arg(long, global = true)]
    output: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    /// Residual target of the iterative solvers.
    #[arg(long, global = true)]
    tol: Option<f64>,
    /// Initial continuation step in (0, 1].
    #[arg(long, global = true)]
    delta: Option<f64>,
    /// Iteration cap per Picard run or Newton start.
    #[arg(long, global = true)]
    max_iter: Option<usize>,
    #[arg(long, global = true, value_enum)]
    mode: Option<ModeArg>,
    /// Seed for sampling and multi-start.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve a problem file.
    Solve { file: PathBuf },
    /// Solve with the brute-force reference method.
    Oracle { file: PathBuf },
    /// Check solvability conditions without solving.
    Check {
        file: PathBuf,
        /// Sample pairs per level for the nonlinear checks.
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Solve a bundled example.
    Demo { name: Demo },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Continuation,
    Picard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Demo {
    PartiallyCoupled,
    CorollarySpecial,
    SingularGamma,
    MonotoneFamily,
}

impl Demo {
    pub fn source(self) -> &'static str {
        match self {
            Demo::PartiallyCoupled => include_str!("../demos/partially-coupled.json"),
            Demo::CorollarySpecial => include_str!("../demos/corollary-special.json"),
            Demo::SingularGamma => include_str!("../demos/singular-gamma.json"),
            Demo::MonotoneFamily => include_str!("../demos/monotone-family.json"),
        }
    }
}

/// Effective solver settings: flag, then file, then default.
#[derive(Debug, Clone, Copy)]
struct Settings {
    tolerance: f64,
    delta: f64,
    max_iter: Option<usize>,
    mode: Mode,
    seed: u64,
}

impl Settings {
    fn resolve(cli: &Cli, problem: &LoadedProblem) -> Self {
        let file = problem.options;
        let defaults = ContinuationOptions::default();
        let mode = match cli.mode {
            Some(ModeArg::Picard) => Mode::FlatPicard,
            Some(ModeArg::Continuation) => Mode::Continuation,
            None => match file.mode {
                Some(ModeName::Picard) => Mode::FlatPicard,
                _ => Mode::Continuation,
            },
        };
        Self {
            tolerance: cli.tol.or(file.tolerance).unwrap_or(defaults.tolerance),
            delta: cli.delta.or(file.delta).unwrap_or(defaults.delta),
            max_iter: cli.max_iter.or(file.max_iter),
            mode,
            seed: cli.seed.or(file.seed).unwrap_or(0),
        }
    }

    fn continuation(&self) -> ContinuationOptions {
        let d = ContinuationOptions::default();
        ContinuationOptions {
            delta: self.delta,
            tolerance: self.tolerance,
            max_iter: self.max_iter.unwrap_or(d.max_iter),
            mode: self.mode,
            ..d
        }
    }

    fn newton(&self) -> NewtonOptions {
        let d = NewtonOptions::default();
        NewtonOptions { tolerance: self.tolerance, max_iter: self.max_iter.unwrap_or(d.max_iter), seed: self.seed, ..d }
    }
}

struct Outcome {
    code: i32,
    report: Report,
}

fn done(code: i32, report: Report) -> Result<Outcome, LoadError> {
    Ok(Outcome { code, report })
}

pub fn run_cli<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    run_cli_with(args, &mut std::io::stdout(), &mut std::io::stderr())
}

pub fn run_cli_with<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_SOLVED
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_INPUT
                }
            };
        }
    };
    let loaded = match &cli.command {
        Command::Solve { file } | Command::Oracle { file } | Command::Check { file, .. } => load_problem(file),
        Command::Demo { name } => load_problem_str(name.source()),
    };
    let problem = match loaded {
        Ok(p) => p,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INPUT;
        }
    };
    let settings = Settings::resolve(&cli, &problem);
    let outcome = match &cli.command {
        Command::Solve { .. } | Command::Demo { .. } => solve(&problem, &settings),
        Command::Oracle { .. } => oracle(&problem, &settings),
        Command::Check { samples, .. } => check(&problem, &settings, *samples),
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_INPUT;
        }
    };
    let text = match cli.format {
        Format::Json => outcome.report.to_json(),
        Format::Csv => outcome.report.to_csv(problem.tree.branching()),
    };
    let written = match &cli.output {
        Some(path) => std::fs::write(path, &text).map_err(|e| format!("cannot write {}: {e}", path.display())),
        None => out.write_all(text.as_bytes()).map_err(|e| e.to_string()),
    };
    if let Err(msg) = written {
        let _ = writeln!(err, "error: {msg}");
        return EXIT_INPUT;
    }
    if let Some(msg) = &outcome.report.message {
        if outcome.code != EXIT_SOLVED {
            let _ = writeln!(err, "{msg}");
        }
    }
    outcome.code
}

fn riccati_report(data: &RiccatiData<f64>) -> RiccatiReport {
    RiccatiReport {
        start: data.slope.start(),
        slope: data.slope.levels().to_vec(),
        offset: data.offset.levels().iter().skip(data.slope.start() - data.offset.start()).cloned().collect(),
    }
}

fn singular_certificate(tree: &Tree, data: &RiccatiData<f64>) -> Certificate {
    let ratio = data.singular.first().and_then(|&node| match data.verdicts.get(node) {
        Some(GammaVerdict::Singular { ratio }) => Some(*ratio),
        _ => None,
    });
    Certificate {
        kind: "singular_gamma".into(),
        nodes: data.singular.iter().map(|&n| node_label(n, tree.branching())).collect(),
        ratio,
        rank: None,
        unknowns: None,
    }
}

fn linear_coefficients(problem: &LoadedProblem) -> Result<Option<Coefficients>, LoadError> {
    Ok(match &problem.bound {
        Bound::Linear(c) => Some((**c).clone()),
        Bound::Special(inputs) => Some(SpecialSolver::new(&problem.tree)?.coefficients(inputs)),
        _ => None,
    })
}

fn solve(problem: &LoadedProblem, settings: &Settings) -> Result<Outcome, LoadError> {
    let tree = &problem.tree;
    let kind = problem.kind.name();
    match &problem.bound {
        Bound::Bsde { terminal, generator } => {
            let n = tree.branching();
            let horizon = tree.horizon() as f64;
            let bsde = BsdeProblem::scalar(
                terminal.clone(),
                |t, node: NodeId, y, z: &[f64]| {
                    generator.eval_or_nan(&Env { t: t as f64, x: 0.0, y, z, w: branch_variable(node, n) })
                },
                |node, y| generator.eval_or_nan(&Env { t: horizon, x: 0.0, y, z: &[], w: branch_variable(node, n) }),
            );
            let out = solve_bsde(tree, &bsde)?;
            let backward = bsde_residual(tree, &bsde, &out)?;
            let mut report = Report::new(kind, Status::Solved, tree);
            report.solution = records_of(tree, None, &out.scalar_y(), &out.scalar_z());
            report.residuals = Some(crate::report::ResidualReport { forward: 0.0, backward });
            done(EXIT_SOLVED, report)
        }
        Bound::Linear(coeffs) => match solve_linear(tree, coeffs, problem.x0)? {
            LinearOutcome::Solved(s) => {
                let mut report = Report::new(kind, Status::Solved, tree);
                report.solution = records(tree, &s.solution);
                report.residuals = Some(s.solution.residuals.into());
                report.riccati = Some(riccati_report(&s.riccati));
                done(EXIT_SOLVED, report)
            }
            LinearOutcome::Unsolvable { riccati, .. } => {
                let mut report = Report::new(kind, Status::Unsolvable, tree);
                let cert = singular_certificate(tree, &riccati);
                report.message = Some(format!("Gamma is singular at {}", cert.nodes.join(", ")));
                report.certificate = Some(cert);
                report.riccati = Some(riccati_report(&riccati));
                done(EXIT_UNSOLVABLE, report)
            }
        },
        Bound::Special(inputs) => {
            let solver = SpecialSolver::new(tree)?;
            let solution = solver.solve(tree, inputs, problem.x0)?;
            let mut report = Report::new(kind, Status::Solved, tree);
            report.solution = records(tree, &solution);
            report.residuals = Some(solution.residuals.into());
            report.riccati = Some(riccati_report(&solver.riccati(tree, inputs)?));
            done(EXIT_SOLVED, report)
        }
        Bound::Nonlinear(nl) => match solve_nonlinear(tree, nl, problem.x0, &settings.continuation()) {
            Ok(s) => {
                let mut report = Report::new(kind, Status::Solved, tree);
                report.solution = records(tree, &s.solution);
                report.residuals = Some(s.solution.residuals.into());
                report.stats = Some(stats_report(&s.stats));
                done(EXIT_SOLVED, report)
            }
            Err(e) => {
                if let SolveFailure::Invalid(inner) = e.failure {
                    return Err(inner.into());
                }
                let mut report = Report::new(kind, Status::NoConvergence, tree);
                report.message = Some(failure_message(&e.failure));
                if let Some(best) = e.best() {
                    report.solution = records(tree, best);
                    report.residuals = Some(best.residuals.into());
                }
                report.stats = Some(stats_report(&e.stats));
                done(EXIT_NO_CONVERGENCE, report)
            }
        },
    }
}

fn failure_message(f: &SolveFailure<f64>) -> String {
    match f {
        SolveFailure::NoContraction { alpha, iterations } => {
            format!("Picard iteration did not contract at alpha = {alpha} after {iterations} iterations")
        }
        SolveFailure::StepUnderflow { delta, .. } => format!("continuation step underflow at delta = {delta}"),
        SolveFailure::NonFiniteIterate { alpha } => format!("non-finite iterate at alpha = {alpha}"),
        SolveFailure::DepthExceeded { depth, limit } => format!("ladder depth {depth} exceeds the limit {limit}"),
        SolveFailure::BudgetExhausted { inner_solves, .. } => format!("solve budget exhausted after {inner_solves} inner solves"),
        SolveFailure::Invalid(e) => e.to_string(),
    }
}

fn stats_report(s: &fbsde_core::nonlinear::SolveStats<f64>) -> StatsReport {
    StatsReport {
        delta: s.delta,
        levels: s.levels.len(),
        iterations: s.iterations(),
        halvings: s.halvings,
        inner_solves: s.inner_solves,
        contraction_witnessed: s.contraction_witnessed(),
        contraction_broken: s.contraction_broken(),
    }
}

fn oracle(problem: &LoadedProblem, settings: &Settings) -> Result<Outcome, LoadError> {
    let tree = &problem.tree;
    let kind = problem.kind.name();
    if let Some(coeffs) = linear_coefficients(problem)? {
        let method = OracleReport { method: "global_linear_system".into(), starts: Vec::new(), start_spread: None };
        let (code, mut report) = match linear_oracle(tree, &coeffs, problem.x0)? {
            LinearVerdict::Unique(s) => {
                let mut report = Report::new(kind, Status::Solved, tree);
                report.solution = records(tree, &s);
                report.residuals = Some(s.residuals.into());
                (EXIT_SOLVED, report)
            }
            LinearVerdict::NoSolution { rank, unknowns, residual } => {
                let mut report = Report::new(kind, Status::Unsolvable, tree);
                report.message = Some(format!("global system is inconsistent (rank {rank} of {unknowns}, residual {residual:e})"));
                report.certificate = Some(Certificate {
                    kind: "no_solution".into(),
                    nodes: Vec::new(),
                    ratio: None,
                    rank: Some(rank),
                    unknowns: Some(unknowns),
                });
                (EXIT_UNSOLVABLE, report)
            }
            LinearVerdict::InfinitelyMany { rank, unknowns } => {
                let mut report = Report::new(kind, Status::Unsolvable, tree);
                report.message = Some(format!("global system is rank deficient (rank {rank} of {unknowns})"));
                report.certificate = Some(Certificate {
                    kind: "infinitely_many".into(),
                    nodes: Vec::new(),
                    ratio: None,
                    rank: Some(rank),
                    unknowns: Some(unknowns),
                });
                (EXIT_UNSOLVABLE, report)
            }
        };
        report.oracle = Some(method);
        return done(code, report);
    }
    let Bound::Nonlinear(nl) = &problem.bound else {
        return Err(LoadError::Schema { path: "kind".into(), message: "no oracle for bsde problems".into() });
    };
    let summaries = |starts: &[fbsde_core::oracle::StartReport<f64>]| -> Vec<StartSummary> {
        starts.iter().map(|s| StartSummary { converged: s.converged, iterations: s.iterations, residual: s.residual }).collect()
    };
    match solve_oracle(tree, nl, problem.x0, &settings.newton()) {
        Ok(o) => {
            let mut report = Report::new(kind, Status::Solved, tree);
            report.solution = records(tree, &o.solution);
            report.residuals = Some(o.solution.residuals.into());
            report.oracle = Some(OracleReport {
                method: "newton".into(),
                starts: summaries(&o.starts),
                start_spread: Some(o.start_spread()),
            });
            done(EXIT_SOLVED, report)
        }
        Err(OracleFailure::Invalid(e)) => Err(e.into()),
        Err(OracleFailure::NoConvergence { residual, best, starts }) => {
            let mut report = Report::new(kind, Status::NoConvergence, tree);
            report.message = Some(format!("Newton did not converge from any start (best residual {residual:e})"));
            report.solution = records(tree, &best);
            report.residuals = Some(best.residuals.into());
            report.oracle = Some(OracleReport { method: "newton".into(), starts: summaries(&starts), start_spread: None });
            done(EXIT_NO_CONVERGENCE, report)
        }
    }
}

fn check(problem: &LoadedProblem, settings: &Settings, samples: usize) -> Result<Outcome, LoadError> {
    let tree = &problem.tree;
    let kind = problem.kind.name();
    if let Some(coeffs) = linear_coefficients(problem)? {
        let data = riccati_backward(tree, &coeffs)?;
        if data.is_solvable() {
            let mut report = Report::new(kind, Status::Checked, tree);
            report.message = Some("Gamma is invertible at every node".into());
            report.riccati = Some(riccati_report(&data));
            return done(EXIT_SOLVED, report);
        }
        let mut report = Report::new(kind, Status::Unsolvable, tree);
        let cert = singular_certificate(tree, &data);
        report.message = Some(format!("Gamma is singular at {}", cert.nodes.join(", ")));
        report.certificate = Some(cert);
        report.riccati = Some(riccati_report(&data));
        return done(EXIT_UNSOLVABLE, report);
    }
    match &problem.bound {
        Bound::Nonlinear(nl) => {
            let r = check_assumptions(tree, nl, samples, settings.seed);
            let (status, clause, node, ratio) = match &r.verdict {
                Verdict::SatisfiedOnSamples => (Status::Checked, None, None, None),
                Verdict::Violated { clause, witness } => (
                    Status::AssumptionViolated,
                    Some(clause.name().to_string()),
                    Some(node_label(witness.node, tree.branching())),
                    Some(witness.ratio),
                ),
            };
            let mut report = Report::new(kind, status, tree);
            report.message = clause.as_ref().map(|c| format!("sampled violation of the {c} condition"));
            report.diagnostics = Some(DiagnosticsReport {
                samples: r.samples,
                lipschitz: r.lipschitz,
                monotone_interior: r.monotone_interior,
                monotone_initial: r.monotone_initial,
                monotone_terminal: r.monotone_terminal,
                terminal_increasing: r.terminal_increasing,
                satisfied: r.satisfied(),
                violated_clause: clause,
                witness_node: node,
                witness_ratio: ratio,
            });
            done(EXIT_SOLVED, report)
        }
        _ => {
            let mut report = Report::new(kind, Status::Checked, tree);
            report.message = Some("backward equations with a Lipschitz generator are always solvable".into());
            done(EXIT_SOLVED, report)
        }
    }
}
