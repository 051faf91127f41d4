use fbsde_core::linear::{solve_special, LinearCoefficients};
use fbsde_core::martingale::ZRow;
use fbsde_core::nonlinear::{
    check_assumptions, nonlinear_residual, solve_continuation, solve_continuation_from, solve_flat_picard, Clause,
    ContinuationOptions, NonlinearProblem, Verdict,
};
use fbsde_core::oracle::{fd_jacobian, forward_defect, linear_oracle, solve_oracle, LinearVerdict, NewtonOptions};
use fbsde_core::tree::ScenarioTree;
use fbsde_core::{sample, NodeId, Problem, Solution, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn family_instance(rng: &mut ChaCha8Rng, k: usize) -> (Tree, Problem, f64) {
    let tree = sample::tree(rng, 2 + k % 2, 1 + k % 3, 0.1);
    let kappa = rng.gen_range(0.05..0.2);
    let x0 = rng.gen_range(-2.0..2.0);
    (tree, NonlinearProblem::monotone_family(kappa), x0)
}

#[test]
fn continuation_agrees_with_newton_on_the_monotone_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for k in 0..12 {
        let (tree, problem, x0) = family_instance(&mut rng, k);
        assert!(check_assumptions(&tree, &problem, 100, k as u64).satisfied());
        let s = solve_continuation(&tree, &problem, x0, &ContinuationOptions::default()).unwrap();
        assert!(s.solution.residuals.max() <= 1e-10);
        assert!(s.stats.contraction_witnessed() > 0);
        assert_eq!(s.stats.contraction_broken(), 0);
        let o = solve_oracle(&tree, &problem, x0, &NewtonOptions { seed: k as u64, ..Default::default() }).unwrap();
        assert!(o.starts.iter().all(|s| s.converged));
        assert!(o.start_spread() <= 1e-9);
        assert!(s.solution.max_difference(&o.solution) <= 1e-8);
    }
}

#[test]
fn any_starting_guess_reaches_the_same_solution() {
    let mut rng = ChaCha8Rng::seed_from_u64(78);
    let (tree, problem, x0) = family_instance(&mut rng, 4);
    let opts = ContinuationOptions::default();
    let reference = solve_continuation(&tree, &problem, x0, &opts).unwrap().solution;
    for _ in 0..3 {
        let h = tree.horizon();
        let n = tree.branching();
        let mut init: Solution = reference.clone();
        init.x = sample::process(&mut rng, &tree, 0, h, 2.0);
        init.y = sample::process(&mut rng, &tree, 0, h, 2.0);
        init.z = sample::row_process(&mut rng, &tree, 0, h - 1, n, 2.0).map(|_, r| ZRow(r.clone()).canonicalize());
        let other = solve_continuation_from(&tree, &problem, x0, &opts, &init).unwrap().solution;
        assert!(other.max_difference(&reference) <= 1e-9);
    }
}

#[test]
fn flat_picard_handles_weak_coupling() {
    let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
    let problem = NonlinearProblem::monotone_family(0.1);
    let flat = solve_flat_picard(&tree, &problem, 0.5, &ContinuationOptions::default()).unwrap();
    let laddered = solve_continuation(&tree, &problem, 0.5, &ContinuationOptions::default()).unwrap();
    assert!(flat.solution.max_difference(&laddered.solution) <= 1e-9);
    assert_eq!(flat.stats.levels.len(), 1);
}

#[test]
fn blending_mixes_with_the_special_coefficients() {
    let p: Problem = NonlinearProblem::new(
        |_, _, _, y, _| -2.0 * y,
        |_, _, _, _, _| vec![0.0; 2],
        |_, _, x, _, _| x,
        |_, x, _| x,
        |_, x| x,
    );
    let half = p.blend(0.5).unwrap();
    let zero = p.blend(0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let (x, y, z) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), [rng.gen_range(-2.0..2.0)]);
        assert!(((half.drift)(0, NodeId::ROOT, x, y, &z) + 1.5 * y).abs() < 1e-15);
        assert_eq!((zero.drift)(0, NodeId::ROOT, x, y, &z), -y);
        assert_eq!((p.blend(1.0).unwrap().drift)(0, NodeId::ROOT, x, y, &z), -2.0 * y);
    }
    assert!(p.blend(1.5).is_err());
}

#[test]
fn diagnostics_estimate_lipschitz_and_catch_violations() {
    let tree = ScenarioTree::<f64>::uniform(2, 2).unwrap();
    let steep: Problem = NonlinearProblem::new(
        |_, _, _, y: f64, _| -y,
        |_, _, _, _, zt: &[f64]| vec![-zt[0], 0.0],
        |_, _, x, _, _| 10.0 * x,
        |_, x, _| 10.0 * x,
        |_, x| x,
    );
    let report = check_assumptions(&tree, &steep, 200, 3);
    assert!(report.lipschitz >= 10.0 - 1e-9);

    let anti: Problem = NonlinearProblem::new(
        |_, _, _, y, _| y,
        |_, _, _, _, _| vec![0.0; 2],
        |_, _, x, _, _| x,
        |_, x, _| x,
        |_, x| x,
    );
    match check_assumptions(&tree, &anti, 200, 3).verdict {
        Verdict::Violated { clause, witness } => {
            assert!(matches!(clause, Clause::MonotoneInterior | Clause::MonotoneInitial | Clause::MonotoneTerminal));
            assert!(witness.ratio >= 0.0);
        }
        Verdict::SatisfiedOnSamples => panic!("expected a violation"),
    }
}

#[test]
fn newton_oracle_matches_global_linear_system() {
    let mut rng = ChaCha8Rng::seed_from_u64(79);
    for k in 0..8 {
        let tree = sample::tree(&mut rng, 2 + k % 2, 1 + k % 3, 0.05);
        let coeffs: LinearCoefficients<f64> = sample::linear_coefficients(&mut rng, &tree, 0.5);
        let problem = NonlinearProblem::from_linear(&tree, &coeffs).unwrap();
        let LinearVerdict::Unique(global) = linear_oracle(&tree, &coeffs, 0.7).unwrap() else { continue };
        let newton = solve_oracle(&tree, &problem, 0.7, &NewtonOptions::default()).unwrap();
        assert!(newton.solution.max_difference(&global) <= 1e-8);
        let r = nonlinear_residual(&tree, &problem, &global).unwrap();
        assert!(r.max() <= 1e-9);
    }
}

#[test]
fn jacobian_columns_match_directional_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(80);
    let (tree, problem, x0) = family_instance(&mut rng, 5);
    let count = tree.node_count(1, tree.horizon());
    let f = |v: &[f64]| forward_defect(&tree, &problem, x0, v);
    for _ in 0..5 {
        let point: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let dir: Vec<f64> = (0..count).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let jac = fd_jacobian(f, &point, 1e-6).unwrap();
        let predicted = jac.mul_vec(&dir);
        let eps = 1e-6;
        let plus: Vec<f64> = point.iter().zip(&dir).map(|(p, d)| p + eps * d).collect();
        let minus: Vec<f64> = point.iter().zip(&dir).map(|(p, d)| p - eps * d).collect();
        let (fp, fm) = (f(&plus).unwrap(), f(&minus).unwrap());
        for (i, want) in fp.iter().zip(&fm).map(|(a, b)| (a - b) / (2.0 * eps)).enumerate() {
            assert!((predicted[i] - want).abs() <= 1e-5 * (1.0 + want.abs()));
        }
    }
}

#[test]
fn special_problem_solves_to_the_linear_answer() {
    let mut rng = ChaCha8Rng::seed_from_u64(81);
    let tree: Tree = sample::tree(&mut rng, 3, 3, 0.05);
    let problem = NonlinearProblem::linear_special();
    let s = solve_continuation(&tree, &problem, 1.3, &ContinuationOptions::default()).unwrap().solution;
    let direct = solve_special(&tree, &fbsde_core::linear::SpecialInputs::zeros(&tree), 1.3).unwrap().solution;
    assert_eq!(s.x, direct.x);
    assert_eq!(s.y, direct.y);
    assert_eq!(s.z.map(|_, z| z.canonicalize()), direct.z.map(|_, z| z.canonicalize()));
}

#[test]
fn exhausted_halvings_fail_without_exhausting_the_stack() {
    let tree = ScenarioTree::<f64>::uniform(2, 3).unwrap();
    let opts = ContinuationOptions { max_iter: 1, ..Default::default() };
    let err = solve_continuation(&tree, &NonlinearProblem::monotone_family(0.1), 1.0, &opts).unwrap_err();
    assert!(matches!(err.failure, fbsde_core::nonlinear::SolveFailure::StepUnderflow { .. }));
    assert_eq!(err.stats.halvings, opts.max_halvings + 1);
    let bad = ContinuationOptions { delta: 0.0, ..Default::default() };
    assert!(matches!(
        solve_continuation(&tree, &NonlinearProblem::monotone_family(0.1), 1.0, &bad).unwrap_err().failure,
        fbsde_core::nonlinear::SolveFailure::Invalid(_)
    ));
}
