//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use fbsde_cli::expr::{parse_expression, Env, ExprError};
use fbsde_cli::problem::load_problem_str;
use fbsde_cli::report::Report;
use fbsde_cli::run_cli_with;
use fbsde_core::bsde::{bsde_residual, solve_bsde, BsdeProblem};
use fbsde_core::linalg::Matrix;
use fbsde_core::linear::{solve_linear, solve_special, LinearCoefficients, SpecialInputs, SpecialSolver};
use fbsde_core::martingale::{norm_constants, represent, ZRow};
use fbsde_core::nonlinear::{check_assumptions, solve_continuation, ContinuationOptions, NonlinearProblem};
use fbsde_core::oracle::{linear_oracle, solve_oracle, LinearVerdict, NewtonOptions};
use fbsde_core::tree::{AdaptedProcess, ScenarioTree};
use fbsde_core::{sample, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REPRESENTATION_TOL: f64 = 1e-12;
const EQUIVALENCE_TOL: f64 = 1e-12;
const NORM_TOL: f64 = 1e-12;
const BSDE_TOL: f64 = 1e-12;
const BSDE_RESIDUAL_TOL: f64 = 1e-11;
const LINEAR_MATCH_TOL: f64 = 1e-8;
const SLOPE_TOL: f64 = 1e-12;
const NONLINEAR_RESIDUAL_TOL: f64 = 1e-10;
const NONLINEAR_MATCH_TOL: f64 = 1e-8;
const MULTI_START_TOL: f64 = 1e-9;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn cli(args: &[&str]) -> (i32, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli_with(std::iter::once("fbsde").chain(args.iter().copied()), &mut out, &mut err);
    (code, String::from_utf8(out).expect("utf-8 report"))
}

fn representation_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for k in 0..200 {
        let n = 2 + k % 3;
        let h = 1 + k % 5;
        let tree: Tree = sample::tree(&mut rng, n, h, 0.02);
        let y = sample::process(&mut rng, &tree, 0, h, 5.0);
        for t in 0..h {
            let children = y.level(t + 1).expect("level");
            for node in tree.nodes(t) {
                let values = &children[node.index * n..(node.index + 1) * n];
                let z = represent(&tree, node, values).map_err(|e| e.to_string())?;
                let probs = tree.transition(node).map_err(|e| e.to_string())?;
                let mean: f64 = probs.iter().zip(values).map(|(p, v)| p * v).sum();
                for (i, v) in values.iter().enumerate() {
                    worst = worst.max((z.apply_increment(probs, i) - (v - mean)).abs());
                }
            }
        }
    }
    ensure(worst <= REPRESENTATION_TOL, || format!("max error {worst:e}"))?;
    Ok(format!("200 pairs, max error {worst:.1e}"))
}

fn equivalence_criteria() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut equivalent = 0;
    for k in 0..200 {
        let n = 2 + k % 4;
        let probs: Vec<f64> = sample::probability_row(&mut rng, n, 0.02);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let b: Vec<f64> = match k % 4 {
            0 | 1 => {
                let shift = rng.gen_range(-3.0..3.0);
                a.iter().map(|v| v + shift).collect()
            }
            2 => (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            _ => {
                let mut b = a.clone();
                b[rng.gen_range(0..n)] += rng.gen_range(0.1..1.0);
                b
            }
        };
        let (za, zb) = (ZRow(a.clone()), ZRow(b.clone()));
        let products = (0..n).all(|i| (za.apply_increment(&probs, i) - zb.apply_increment(&probs, i)).abs() <= EQUIVALENCE_TOL);
        let diff: Vec<f64> = a.iter().zip(&b).map(|(u, v)| u - v).collect();
        let spread = diff.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - diff.iter().cloned().fold(f64::INFINITY, f64::min);
        let constant = spread <= EQUIVALENCE_TOL;
        let contracted = za.equivalent(&zb).map_err(|e| e.to_string())?;
        ensure(products == constant && constant == contracted, || {
            format!("pair {k}: products {products}, constant {constant}, contraction {contracted}")
        })?;
        equivalent += usize::from(constant);
    }
    Ok(format!("200 pairs agree ({equivalent} equivalent)"))
}

fn norm_bounds() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut tight_ratio = 0.0;
    for k in 0..200 {
        let uniform_binary = k % 5 == 0;
        let n = if uniform_binary { 2 } else { 2 + k % 3 };
        let h = 1 + k % 4;
        let tree: Tree =
            if uniform_binary { ScenarioTree::uniform(2, h).map_err(|e| e.to_string())? } else { sample::tree(&mut rng, n, h, 0.05) };
        let z = sample::row_process(&mut rng, &tree, 0, h - 1, n, 3.0);
        let c = norm_constants(&tree);
        let (mut zm, mut zt) = (0.0, 0.0);
        for (node, row) in z.iter() {
            let weight = tree.node_probability(node);
            let probs = tree.transition(node).map_err(|e| e.to_string())?;
            let mean: f64 = probs.iter().zip(row).map(|(p, v)| p * v).sum();
            zm += weight * probs.iter().zip(row).map(|(p, v)| p * (v - mean).powi(2)).sum::<f64>();
            zt += weight * row[..n - 1].iter().map(|v| (v - row[n - 1]).powi(2)).sum::<f64>();
        }
        ensure(c.lower * zt <= zm * (1.0 + NORM_TOL) && zm <= c.upper * zt * (1.0 + NORM_TOL), || {
            format!("instance {k}: {} * {zt} <= {zm} <= {} * {zt} fails", c.lower, c.upper)
        })?;
        if uniform_binary {
            let ratio = zm / zt;
            ensure((ratio - 0.25).abs() <= NORM_TOL && (c.lower - 0.25).abs() <= NORM_TOL && (c.upper - 0.25).abs() <= NORM_TOL, || {
                format!("uniform binary ratio {ratio}, constants {} {}", c.lower, c.upper)
            })?;
            tight_ratio = ratio;
        }
    }
    Ok(format!("200 processes bounded, uniform binary ratio {tight_ratio}"))
}

fn bsde_constant_generator() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let (mut worst, mut worst_res): (f64, f64) = (0.0, 0.0);
    for k in 0..50 {
        let n = 2 + k % 3;
        let h = 1 + k % 5;
        let tree: Tree = sample::tree(&mut rng, n, h, 0.02);
        let eta: Vec<f64> = (0..tree.level_size(h)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c = rng.gen_range(-2.0..2.0);
        let problem = BsdeProblem::scalar(eta.clone(), move |_, _, _, _| c, move |_, _| c);
        let out = solve_bsde(&tree, &problem).map_err(|e| e.to_string())?;
        // closing martingale by plain averaging over children
        let mut mart = vec![eta];
        for t in (0..h).rev() {
            let above = mart.last().expect("level");
            let level: Vec<f64> = tree
                .nodes(t)
                .map(|node| {
                    let p = tree.transition(node).expect("interior");
                    (0..n).map(|i| p[i] * above[node.index * n + i]).sum()
                })
                .collect();
            mart.push(level);
        }
        mart.reverse();
        for (node, y) in out.scalar_y().iter() {
            worst = worst.max((y - mart[node.depth][node.index] - (h - node.depth) as f64 * c).abs());
        }
        worst_res = worst_res.max(bsde_residual(&tree, &problem, &out).map_err(|e| e.to_string())?);
    }
    ensure(worst <= BSDE_TOL && worst_res <= BSDE_RESIDUAL_TOL, || format!("error {worst:e}, residual {worst_res:e}"))?;
    Ok(format!("50 instances, max error {worst:.1e}, max residual {worst_res:.1e}"))
}

fn root_singular(rng: &mut ChaCha8Rng, n: usize) -> (Tree, LinearCoefficients<f64>) {
    let tree = sample::tree(rng, n, 1, 0.1);
    let mut c = sample::linear_coefficients(rng, &tree, 1.0);
    c.drift_z = c.drift_z.map(|_, v| vec![0.0; v.len()]);
    c.vol_y = c.vol_y.map(|_, v| vec![0.0; v.len()]);
    c.vol_z = c.vol_z.map(|_, m| Matrix::zeros(m.nrows(), m.ncols()));
    c.terminal_slope = c.terminal_slope.map(|_, _| rng.gen_range(0.5..1.5));
    c.gen_x = c.gen_x.map(|_, _| 0.0);
    c.gen_y = c.gen_y.map(|_, _| 0.0);
    let mean_slope = tree.expectation(&c.terminal_slope, 1).expect("leaves");
    c.drift_y = c.drift_y.map(|_, _| 1.0 / mean_slope);
    (tree, c)
}

fn linear_classification() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let (mut solved, mut singular, mut gap): (usize, usize, f64) = (0, 0, 0.0);
    for k in 0..120 {
        let n = 2 + k % 2;
        let (tree, coeffs) = if k % 12 == 11 {
            root_singular(&mut rng, n)
        } else {
            let tree = sample::tree(&mut rng, n, 1 + k % 3, 0.05);
            let c = sample::linear_coefficients(&mut rng, &tree, 1.0);
            (tree, c)
        };
        let x0 = rng.gen_range(-1.0..1.0);
        let recursive = solve_linear(&tree, &coeffs, x0).map_err(|e| e.to_string())?.solved();
        let global = linear_oracle(&tree, &coeffs, x0).map_err(|e| e.to_string())?;
        match (recursive, global) {
            (Some(s), LinearVerdict::Unique(o)) => {
                gap = gap.max(s.solution.max_difference(&o));
                solved += 1;
            }
            (None, LinearVerdict::NoSolution { .. } | LinearVerdict::InfinitelyMany { .. }) => singular += 1,
            (r, g) => return Err(format!("instance {k}: recursion solvable {}, oracle unique {}", r.is_some(), g.is_unique())),
        }
    }
    ensure(gap <= LINEAR_MATCH_TOL, || format!("solutions differ by {gap:e}"))?;
    Ok(format!("120 instances agree ({solved} unique, {singular} singular), max gap {gap:.1e}"))
}

fn singular_detection() -> Check {
    let (code, out) = cli(&["demo", "singular-gamma"]);
    ensure(code == 2, || format!("exit code {code}"))?;
    let report: Report = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let nodes = report.certificate.map(|c| c.nodes).unwrap_or_default();
    ensure(nodes == ["root"], || format!("certificate nodes {nodes:?}"))?;
    let problem = load_problem_str(fbsde_cli::cli::Demo::SingularGamma.source()).map_err(|e| e.to_string())?;
    let fbsde_cli::problem::Bound::Linear(coeffs) = &problem.bound else { return Err("demo is not linear".into()) };
    let at_one = linear_oracle(&problem.tree, coeffs, 1.0).map_err(|e| e.to_string())?;
    let at_zero = linear_oracle(&problem.tree, coeffs, 0.0).map_err(|e| e.to_string())?;
    ensure(matches!(at_one, LinearVerdict::NoSolution { .. }), || "x0 = 1 is not NoSolution".into())?;
    ensure(matches!(at_zero, LinearVerdict::InfinitelyMany { .. }), || "x0 = 0 is not InfinitelyMany".into())?;
    Ok("exit 2 naming root; NoSolution at x0 = 1, InfinitelyMany at x0 = 0".into())
}

fn special_recursion() -> Check {
    let (code, out) = cli(&["demo", "corollary-special", "--format", "json"]);
    ensure(code == 0, || format!("exit code {code}"))?;
    let report: Report = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let levels = report.riccati.ok_or("no riccati block")?.slope;
    let want = [13.0 / 8.0, 5.0 / 3.0, 2.0];
    let tail: Vec<f64> = levels[levels.len() - 3..].iter().map(|l| l[0]).collect();
    for (level, w) in levels[levels.len() - 3..].iter().zip(want) {
        ensure(level.iter().all(|p| (p - w).abs() <= SLOPE_TOL), || format!("level {level:?}, expected {w}"))?;
    }
    for h in 3..=5 {
        let tree = Tree::uniform(2, h).map_err(|e| e.to_string())?;
        let solver = SpecialSolver::new(&tree).map_err(|e| e.to_string())?;
        for (t, w) in (h - 2..=h).zip(want) {
            let level = solver.slope().level(t).ok_or("missing level")?;
            ensure(level.iter().all(|p| (p - w).abs() <= SLOPE_TOL), || format!("T = {h}, t = {t}: {level:?}"))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(107);
    for k in 0..100 {
        let tree: Tree = sample::tree(&mut rng, 2 + k % 3, 1 + k % 4, 0.02);
        let inputs: SpecialInputs<f64> = sample::special_inputs(&mut rng, &tree, 2.0);
        let x0 = rng.gen_range(-2.0..2.0);
        let s = solve_special(&tree, &inputs, x0).map_err(|e| format!("draw {k}: {e}"))?;
        ensure(s.riccati.is_solvable(), || format!("draw {k} reported singular"))?;
    }
    Ok(format!("P levels {tail:?}; 100 draws solvable"))
}

fn family_instance(rng: &mut ChaCha8Rng, k: usize) -> (Tree, NonlinearProblem<f64>, f64) {
    let tree = sample::tree(rng, 2 + k % 2, 1 + k % 3, 0.1);
    let kappa = rng.gen_range(0.05..0.2);
    let x0 = rng.gen_range(-2.0..2.0);
    (tree, NonlinearProblem::monotone_family(kappa), x0)
}

fn nonlinear_family() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (mut residual, mut gap, mut spread): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for k in 0..20 {
        let (tree, problem, x0) = family_instance(&mut rng, k);
        ensure(check_assumptions(&tree, &problem, 200, k as u64).satisfied(), || format!("instance {k} fails the checks"))?;
        let s = solve_continuation(&tree, &problem, x0, &ContinuationOptions::default())
            .map_err(|e| format!("instance {k}: {:?}", e.failure))?;
        let o = solve_oracle(&tree, &problem, x0, &NewtonOptions { seed: k as u64, ..Default::default() })
            .map_err(|e| format!("instance {k}: {e}"))?;
        ensure(o.starts.len() >= 2 && o.starts.iter().all(|s| s.converged), || format!("instance {k}: a start diverged"))?;
        residual = residual.max(s.solution.residuals.max());
        gap = gap.max(s.solution.max_difference(&o.solution));
        spread = spread.max(o.start_spread());
    }
    ensure(residual <= NONLINEAR_RESIDUAL_TOL, || format!("residual {residual:e}"))?;
    ensure(gap <= NONLINEAR_MATCH_TOL, || format!("continuation vs Newton {gap:e}"))?;
    ensure(spread <= MULTI_START_TOL, || format!("multi-start spread {spread:e}"))?;
    Ok(format!("20 instances, residual {residual:.1e}, gap {gap:.1e}, start spread {spread:.1e}"))
}

fn alpha_zero_reduction() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(109);
    for k in 0..10 {
        let tree: Tree = sample::tree(&mut rng, 2 + k % 3, 1 + k % 4, 0.05);
        let x0 = rng.gen_range(-2.0..2.0);
        let s = solve_continuation(&tree, &NonlinearProblem::linear_special(), x0, &ContinuationOptions::default())
            .map_err(|e| format!("{:?}", e.failure))?
            .solution;
        let direct = solve_special(&tree, &SpecialInputs::zeros(&tree), x0).map_err(|e| e.to_string())?.solution;
        let canon = |z: &AdaptedProcess<ZRow<f64>>| z.map(|_, r| r.canonicalize());
        ensure(s.x == direct.x && s.y == direct.y && canon(&s.z) == canon(&direct.z), || format!("instance {k} differs"))?;
    }
    Ok("10 trees, bitwise equal".into())
}

fn contraction_monitor() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(108);
    let (mut witnessed, mut broken) = (0, 0);
    for k in 0..20 {
        let (tree, problem, x0) = family_instance(&mut rng, k);
        let s = solve_continuation(&tree, &problem, x0, &ContinuationOptions::default())
            .map_err(|e| format!("instance {k}: {:?}", e.failure))?;
        witnessed += s.stats.contraction_witnessed();
        broken += s.stats.contraction_broken();
    }
    ensure(broken == 0 && witnessed > 0, || format!("{witnessed} witnessed, {broken} broken"))?;
    Ok(format!("{witnessed} witnessed runs, none broken"))
}

fn random_expression(rng: &mut ChaCha8Rng, depth: usize, z_count: usize, out: &mut String) {
    let space = |rng: &mut ChaCha8Rng, out: &mut String| {
        if rng.gen_bool(0.3) {
            out.push(' ');
        }
    };
    let leaf = depth == 0 || rng.gen_bool(0.25);
    if leaf {
        match rng.gen_range(0..4) {
            0 => out.push_str(&format!("{}", rng.gen_range(0..100))),
            1 => out.push_str(&format!("{:.3}", rng.gen_range(0.0..10.0))),
            2 => out.push_str(&format!("{}e{}", rng.gen_range(1..9), rng.gen_range(-3..3))),
            _ => {
                let names = ["t", "x", "y", "w"];
                let pick = rng.gen_range(0..names.len() + z_count);
                match names.get(pick) {
                    Some(name) => out.push_str(name),
                    None => out.push_str(&format!("z{}", pick - names.len() + 1)),
                }
            }
        }
        return;
    }
    match rng.gen_range(0..5) {
        0 | 1 => {
            random_expression(rng, depth - 1, z_count, out);
            space(rng, out);
            out.push(['+', '-', '*', '/', '^'][rng.gen_range(0..5)]);
            space(rng, out);
            random_expression(rng, depth - 1, z_count, out);
        }
        2 => {
            out.push('-');
            random_expression(rng, depth - 1, z_count, out);
        }
        3 => {
            let (name, arity) = [("sin", 1), ("cos", 1), ("exp", 1), ("tanh", 1), ("abs", 1), ("min", 2), ("max", 2)][rng.gen_range(0..7)];
            out.push_str(name);
            out.push('(');
            for a in 0..arity {
                if a > 0 {
                    out.push(',');
                    space(rng, out);
                }
                random_expression(rng, depth - 1, z_count, out);
            }
            out.push(')');
        }
        _ => {
            out.push('(');
            random_expression(rng, depth - 1, z_count, out);
            out.push(')');
        }
    }
}

fn parser_fuzz() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(111);
    let (mut finite, mut domain) = (0, 0);
    for k in 0..1000 {
        let mut src = String::new();
        random_expression(&mut rng, 1 + k % 6, 3, &mut src);
        let e = parse_expression(&src).map_err(|e| format!("`{src}` did not parse: {e}"))?;
        let z = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0)];
        let env = Env { t: rng.gen_range(0.0..5.0), x: rng.gen_range(-3.0..3.0), y: rng.gen_range(-3.0..3.0), z: &z, w: 1.0 };
        match e.eval(&env) {
            Ok(v) if v.is_finite() => finite += 1,
            Ok(v) => return Err(format!("`{src}` evaluated to {v} without an error")),
            Err(ExprError::Domain { pos, .. }) if pos < src.len() => domain += 1,
            Err(other) => return Err(format!("`{src}`: unexpected {other}")),
        }
    }
    let cases: [(&str, usize); 3] = [("min(x, ", 7), ("2 * q + 1", 4), ("x + max(x)", 4)];
    for (src, want) in cases {
        let got = parse_expression(src).err().map(|e| e.position());
        ensure(got == Some(want), || format!("`{src}`: position {got:?}, expected {want}"))?;
    }
    Ok(format!("1000 expressions ({finite} finite, {domain} domain errors); 3 positioned errors exact"))
}

fn main() {
    let criteria: [(&str, fn() -> Check, Option<Duration>); 11] = [
        ("representation identity", representation_identity, Some(Duration::from_secs(5))),
        ("M-equivalence criteria agree", equivalence_criteria, None),
        ("norm equivalence bounds", norm_bounds, None),
        ("BSDE with constant generator", bsde_constant_generator, None),
        ("linear solvability matches global system", linear_classification, Some(Duration::from_secs(60))),
        ("singular Gamma detection", singular_detection, None),
        ("special equation slope levels", special_recursion, None),
        ("nonlinear existence and uniqueness", nonlinear_family, Some(Duration::from_secs(120))),
        ("alpha = 0 reduction", alpha_zero_reduction, None),
        ("contraction monitor", contraction_monitor, None),
        ("expression parser", parser_fuzz, None),
    ];
    let mut failed = 0;
    for (i, (name, run, budget)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.2?}, budget {b:?}")),
            (o, _) => o,
        };
        let (tag, detail) = match &outcome {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += usize::from(outcome.is_err());
        println!("criterion {:>2} {tag} {name}: {detail} [{:.2}s]", i + 1, elapsed.as_secs_f64());
    }
    println!("{} of 11 criteria passed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
