use fbsde_core::bsde::{bsde_residual, solve_bsde, BsdeProblem};
use fbsde_core::tree::AdaptedProcess;
use fbsde_core::{sample, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `E[η | F_t]` by repeated one-step conditioning from the leaves.
fn martingale_of(tree: &Tree, eta: &[f64]) -> Vec<Vec<f64>> {
    let h = tree.horizon();
    let mut levels = vec![eta.to_vec()];
    for t in (0..h).rev() {
        let above = AdaptedProcess::new(tree, t + 1, vec![levels.last().unwrap().clone()]).unwrap();
        levels.push(tree.nodes(t).map(|node| tree.cond_exp(&above, node).unwrap()).collect());
    }
    levels.reverse();
    levels
}

#[test]
fn constant_generator_adds_remaining_time() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for k in 0..50 {
        let n = 2 + k % 3;
        let h = 1 + k % 5;
        let tree: Tree = sample::tree(&mut rng, n, h, 0.02);
        let eta: Vec<f64> = (0..tree.level_size(h)).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let c = rng.gen_range(-2.0..2.0);
        let problem = BsdeProblem::scalar(eta.clone(), move |_, _, _, _| c, move |_, _| c);
        let out = solve_bsde(&tree, &problem).unwrap();
        let mart = martingale_of(&tree, &eta);
        for (node, &y) in out.scalar_y().iter() {
            let want = mart[node.depth][node.index] + (h - node.depth) as f64 * c;
            assert!((y - want).abs() <= 1e-12, "instance {k} at {node}");
        }
        assert!(bsde_residual(&tree, &problem, &out).unwrap() <= 1e-11);
    }
}

#[test]
fn nonlinear_generators_leave_small_residuals() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for k in 0..20 {
        let tree: Tree = sample::tree(&mut rng, 2 + k % 3, 1 + k % 4, 0.02);
        let eta: Vec<Vec<f64>> =
            (0..tree.level_size(tree.horizon())).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let problem = BsdeProblem::new(
            2,
            eta,
            |t, _, y, z| vec![y[1].sin() + t as f64 * 0.1, z[0].iter().map(|v| v.tanh()).sum::<f64>() - 0.5 * y[0]],
            |_, y| vec![0.2 * y[0], -y[1].cos()],
        );
        let out = solve_bsde(&tree, &problem).unwrap();
        assert!(bsde_residual(&tree, &problem, &out).unwrap() <= 1e-11);
    }
}

#[test]
fn zero_generator_gives_the_closing_martingale() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let tree: Tree = sample::tree(&mut rng, 3, 3, 0.05);
    let eta: Vec<f64> = (0..27).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let out = solve_bsde(&tree, &BsdeProblem::zero_generator(1, eta.iter().map(|&v| vec![v]).collect())).unwrap();
    let mart = martingale_of(&tree, &eta);
    for (node, &y) in out.scalar_y().iter() {
        assert!((y - mart[node.depth][node.index]).abs() <= 1e-12);
    }
}
