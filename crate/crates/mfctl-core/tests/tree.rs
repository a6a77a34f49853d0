use mfctl_core::assembly::{assemble, AssembledSystem};
use mfctl_core::process::{weighted_mean, LevelProcess};
use mfctl_core::samples::{random_game, square_regulator, two_agent_plane, RandomGame};
use mfctl_core::sde::{estimate_gramian, McConfig, Noise};
use mfctl_core::tree::{tree_backward, tree_backward_residual, tree_dual, tree_forward_state, tree_gramian, tree_operators, tree_rows, TreeSpace, DEFAULT_OPERATOR_BUDGET};
use mfctl_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rvec(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0))
}

fn rand_v(rng: &mut ChaCha8Rng, space: &TreeSpace, m: usize) -> LevelProcess {
    LevelProcess::from_fn(m, space.step_sizes(), |_, _| rvec(rng, m))
}

fn rand_leaves(rng: &mut ChaCha8Rng, space: &TreeSpace, n: usize) -> Vec<DVector<f64>> {
    (0..TreeSpace::level_size(space.depth())).map(|_| rvec(rng, n)).collect()
}

fn example(depth: usize) -> (AssembledSystem, TreeSpace) {
    let sys = assemble(&two_agent_plane()).unwrap();
    let space = TreeSpace::uniform(&sys, depth).unwrap();
    (sys, space)
}

/// `<eta0, x(0)>` against the dual side of the identity.
fn duality_gap(sys: &AssembledSystem, space: &TreeSpace, eta0: &DVector<f64>, v: &LevelProcess, leaves: &[DVector<f64>]) -> f64 {
    let x0 = tree_backward(sys, space, leaves, v).unwrap().x.levels[0][0].clone();
    let dual = tree_dual(sys, space, eta0).unwrap();
    let depth = space.depth();
    let mut rhs: f64 = dual.terminal.iter().zip(leaves).zip(space.weights(depth)).map(|((a, b), w)| w * a.dot(b)).sum();
    for k in 0..depth {
        let dt = space.grid().dt(k);
        for j in 0..TreeSpace::level_size(k) {
            rhs += dt * space.weights(k)[j] * dual.observation.levels[k][j].dot(&v.levels[k][j]);
        }
    }
    (eta0.dot(&x0) - rhs).abs() / (1.0 + rhs.abs())
}

#[test]
fn path_labels_and_increments() {
    let (_, space) = example(3);
    assert_eq!(TreeSpace::path_string(0, 0), "");
    assert_eq!(TreeSpace::path_string(3, 5), "dud");
    assert_eq!(TreeSpace::path_string(3, 0), "uuu");
    let h = (1.0f64 / 3.0).sqrt();
    let inc = space.increments_of(3, 5);
    assert_eq!(inc.len(), 3);
    assert!((inc[0] + h).abs() < 1e-15 && (inc[1] - h).abs() < 1e-15 && (inc[2] + h).abs() < 1e-15);
    assert_eq!(space.knot_sizes(), vec![1, 2, 4, 8]);
    assert!((space.weights(3).iter().sum::<f64>() - 1.0).abs() < 1e-15);
}

#[test]
fn depth_beyond_cap_is_refused() {
    let sys = assemble(&two_agent_plane()).unwrap();
    assert!(matches!(TreeSpace::uniform(&sys, 13), Err(Error::BudgetExceeded { .. })));
}

#[test]
fn forward_one_step_by_hand() {
    // A = -I, C = I, no control: x = x0 (1 - dt +- sqrt dt)
    let (sys, space) = example(1);
    let x0 = DVector::from_row_slice(&[1.0, -2.0]);
    let u = LevelProcess::zeros(5, space.step_sizes());
    let st = tree_forward_state(&sys, &space, &x0, &u).unwrap();
    assert!((&st.x.levels[1][0] - &x0 * 1.0).amax() < 1e-15);
    assert!((&st.x.levels[1][1] - &x0 * -1.0).amax() < 1e-15);
    assert!((&st.mean[1] - DVector::zeros(2)).amax() < 1e-15);
}

#[test]
fn forward_mean_matches_weighted_average() {
    let (sys, space) = example(6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let u = rand_v(&mut rng, &space, 5);
    let st = tree_forward_state(&sys, &space, &rvec(&mut rng, 2), &u).unwrap();
    for k in 0..=6 {
        let m = weighted_mean(2, &st.x.levels[k], space.weights(k));
        assert!((&m - &st.mean[k]).amax() < 1e-12, "level {k}");
    }
}

#[test]
fn backward_sweep_satisfies_its_equations() {
    let (sys, space) = example(7);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..5 {
        let b = tree_backward(&sys, &space, &rand_leaves(&mut rng, &space, 2), &rand_v(&mut rng, &space, 3)).unwrap();
        assert!(tree_backward_residual(&sys, &space, &b).unwrap() < 1e-10);
    }
}

#[test]
fn backward_is_linear() {
    let (sys, space) = example(5);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (x1, x2) = (rand_leaves(&mut rng, &space, 2), rand_leaves(&mut rng, &space, 2));
    let (v1, v2) = (rand_v(&mut rng, &space, 3), rand_v(&mut rng, &space, 3));
    let a = 0.7;
    let xs: Vec<_> = x1.iter().zip(&x2).map(|(p, q)| p * a + q).collect();
    let vs = v1.map(3, |k, j, p| p * a + &v2.levels[k][j]);
    let lhs = tree_backward(&sys, &space, &xs, &vs).unwrap();
    let b1 = tree_backward(&sys, &space, &x1, &v1).unwrap();
    let b2 = tree_backward(&sys, &space, &x2, &v2).unwrap();
    let comb = b1.x.map(2, |k, j, p| p * a + &b2.x.levels[k][j]);
    assert!(lhs.x.max_abs_diff(&comb) < 1e-12);
}

#[test]
fn duality_identity_on_tree() {
    let (sys, space) = example(7);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let gap = duality_gap(&sys, &space, &rvec(&mut rng, 2), &rand_v(&mut rng, &space, 3), &rand_leaves(&mut rng, &space, 2));
        assert!(gap < 1e-9, "{gap:e}");
    }
}

#[test]
fn rows_average_to_their_mean_recursion() {
    let (sys, space) = example(6);
    let d = sys.dim();
    let tr = tree_rows(&sys, &space, &DMatrix::identity(d, d)).unwrap();
    for k in 0..=6 {
        let mut m = DMatrix::zeros(d, d);
        for (r, w) in tr.rows[k].iter().zip(space.weights(k)) {
            m += r * *w;
        }
        assert!((&m - &tr.plan.mean_knots[k]).amax() < 1e-12, "level {k}");
    }
}

#[test]
fn operators_reproduce_sweep_and_gramian() {
    let (sys, space) = example(5);
    let ops = tree_operators(&sys, &space, DEFAULT_OPERATOR_BUDGET).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = rand_v(&mut rng, &space, 3);
    let leaves = rand_leaves(&mut rng, &space, 2);
    let direct = tree_backward(&sys, &space, &leaves, &v).unwrap().x.levels[0][0].clone();
    assert!((ops.apply(&v, &leaves) - direct).amax() < 1e-12);
    // G = K W^{-1} K^T with W the node measure dt * weight
    let w: Vec<f64> = (0..5).flat_map(|k| vec![space.grid().dt(k) * space.weights(k)[0]; TreeSpace::level_size(k) * 3]).collect();
    let scaled = DMatrix::from_fn(2, w.len(), |r, c| ops.k_mat[(r, c)] / w[c]);
    let g = &scaled * ops.k_mat.transpose();
    let tg = tree_gramian(&sys, &space, 1e-6).unwrap();
    assert!((&g - &tg.g).amax() < 1e-10 * (1.0 + g.amax()));
    assert!(matches!(tree_operators(&sys, &space, 10), Err(Error::BudgetExceeded { .. })));
}

#[test]
fn gramian_quadratic_form_is_observer_energy() {
    let (sys, space) = example(8);
    let tg = tree_gramian(&sys, &space, 1e-6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let eta = rvec(&mut rng, 2);
        let obs = tree_dual(&sys, &space, &eta).unwrap().observation;
        let mut e = 0.0;
        for k in 0..8 {
            for (o, w) in obs.levels[k].iter().zip(space.weights(k)) {
                e += space.grid().dt(k) * w * o.norm_squared();
            }
        }
        let q = eta.dot(&(&tg.g * &eta));
        assert!((e - q).abs() < 1e-9 * (1.0 + q));
    }
    assert!(tg.controllable);
    assert!((&tg.g - tg.g.transpose()).amax() < 1e-12);
}

#[test]
fn square_regulator_has_zero_gramian() {
    let sys = assemble(&square_regulator()).unwrap();
    let space = TreeSpace::uniform(&sys, 8).unwrap();
    let tg = tree_gramian(&sys, &space, 1e-6).unwrap();
    assert!(tg.is_zero());
    assert!(!tg.controllable);
}

#[test]
fn tree_gramian_agrees_with_two_point_sampling() {
    // Rademacher paths on the tree grid sample the tree measure exactly
    let (sys, space) = example(6);
    let tg = tree_gramian(&sys, &space, 1e-6).unwrap();
    let cfg = McConfig { noise: Noise::Rademacher, ..McConfig::new(20_000, 9) };
    let mc = estimate_gramian(&sys, space.grid(), &cfg, 1e-6).unwrap();
    for i in 0..2 {
        for j in 0..2 {
            let se = mc.std_error[(i, j)];
            assert!((mc.g[(i, j)] - tg.g[(i, j)]).abs() <= 4.0 * se + 1e-12, "({i},{j}) {} vs {} se {se}", mc.g[(i, j)], tg.g[(i, j)]);
        }
    }
    assert_eq!(mc.controllable, tg.controllable);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn duality_holds_on_random_games(seed in 0u64..10_000, mf in any::<bool>()) {
        let spec = random_game(&RandomGame { n: 2, m0: 3, agent_dims: vec![1, 1], mean_field: mf, horizon: 1.0 }, seed);
        let sys = assemble(&spec).unwrap();
        let space = TreeSpace::uniform(&sys, 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = tree_backward(&sys, &space, &rand_leaves(&mut rng, &space, 2), &rand_v(&mut rng, &space, 3)).unwrap();
        prop_assert!(tree_backward_residual(&sys, &space, &b).unwrap() < 1e-9);
        let gap = duality_gap(&sys, &space, &rvec(&mut rng, 2), &rand_v(&mut rng, &space, 3), &rand_leaves(&mut rng, &space, 2));
        prop_assert!(gap < 1e-9);
    }

    #[test]
    fn gramian_is_symmetric_psd(seed in 0u64..10_000) {
        let spec = random_game(&RandomGame { n: 2, m0: 2, agent_dims: vec![1], mean_field: true, horizon: 1.0 }, seed);
        let sys = assemble(&spec).unwrap();
        let space = TreeSpace::uniform(&sys, 6).unwrap();
        let tg = tree_gramian(&sys, &space, 1e-6).unwrap();
        prop_assert!((&tg.g - tg.g.transpose()).amax() < 1e-12);
        prop_assert!(tg.min_eigenvalue > -1e-10 * (1.0 + tg.g.amax()));
    }
}
