use mfctl_core::assembly::{assemble, AssembledSystem};
use mfctl_core::grid::TimeGrid;
use mfctl_core::samples::{square_regulator, two_agent_plane};
use mfctl_core::sde::{
    apply_L, discrete_mean_flow, duality_rhs, estimate_gramian, evaluate_cost, mean_flow, observation_energy, path_increments, sample_phi,
    simulate_dual, simulate_ensemble, simulate_state, sum_over_paths, DualControl, FnControl, FnTerminal, GramianReport, McConfig, Noise,
};
use mfctl_core::sde::{ControlSampler, TerminalSampler};
use mfctl_core::tree::{tree_backward, tree_dual, tree_gramian, TreeSpace};
use mfctl_core::process::LevelProcess;
use mfctl_core::Error;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn example() -> AssembledSystem {
    assemble(&two_agent_plane()).unwrap()
}

fn terminal() -> FnTerminal<impl Fn(&[f64]) -> DVector<f64> + Sync> {
    FnTerminal(2, |w: &[f64]| {
        let s: f64 = w.iter().sum();
        DVector::from_row_slice(&[s, 0.5 - s * s])
    })
}

fn const_v(dim: usize, c: f64) -> FnControl<impl Fn(usize, &[f64]) -> DVector<f64> + Sync, impl Fn(usize) -> DVector<f64> + Sync> {
    FnControl { dim, control: move |_, _: &[f64]| DVector::from_element(dim, c), mean: move |_| DVector::from_element(dim, c) }
}

#[test]
fn mean_flow_against_fine_euler() {
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 4);
    let flow = mean_flow(&sys, &grid);
    let a_hat = sys.pieces[0].backward.a_hat();
    let d = sys.dim();
    let fine = 200_000;
    let h = 1.0 / fine as f64;
    let mut m = DMatrix::<f64>::identity(d, d);
    for i in 0..fine {
        m = &m - &m * &a_hat * h;
        if (i + 1) % (fine / 4) == 0 {
            let k = (i + 1) / (fine / 4);
            assert!((&m - &flow[k]).amax() < 1e-4 * (1.0 + m.amax()), "knot {k}");
        }
    }
}

#[test]
fn discrete_mean_flow_converges_first_order() {
    let sys = example();
    let err = |steps: usize| {
        let g = TimeGrid::uniform(1.0, steps);
        (discrete_mean_flow(&sys, &g).unwrap().last().unwrap() - mean_flow(&sys, &g).last().unwrap()).amax()
    };
    let (e1, e2) = (err(64), err(128));
    assert!(e2 < e1 && e1 / e2 > 1.8 && e1 / e2 < 2.2, "{e1} {e2}");
}

#[test]
fn increments_are_reproducible_per_path() {
    let grid = TimeGrid::uniform(1.0, 16);
    let a = path_increments(&grid, 7, 3, Noise::Gaussian);
    assert_eq!(a, path_increments(&grid, 7, 3, Noise::Gaussian));
    assert_ne!(a, path_increments(&grid, 7, 4, Noise::Gaussian));
    assert_ne!(a, path_increments(&grid, 8, 3, Noise::Gaussian));
    let r = path_increments(&grid, 7, 3, Noise::Rademacher);
    assert!(r.iter().all(|x| (x.abs() - 0.25).abs() < 1e-15));
}

#[test]
fn chunked_sum_matches_serial_sum() {
    let total = sum_over_paths(2000, || 0u64, |s, p| *s += (p as u64) * (p as u64), |a, b| *a += b);
    assert_eq!(total, (0..2000u64).map(|p| p * p).sum::<u64>());
}

#[test]
fn sampled_phi_has_the_declared_mean() {
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 8);
    let paths = 20_000;
    let d = sys.dim();
    let mut s1 = DMatrix::zeros(d, d);
    let mut s2 = DMatrix::zeros(d, d);
    let mut mean = None;
    for p in 0..paths {
        let ph = sample_phi(&sys, &grid, &path_increments(&grid, 11, p, Noise::Gaussian)).unwrap();
        let last = ph.phi.last().unwrap();
        s1 += last;
        s2 += last.component_mul(last);
        mean.get_or_insert(ph.mean.last().unwrap().clone());
    }
    let pf = paths as f64;
    let m = s1 / pf;
    let target = mean.unwrap();
    for i in 0..d {
        for j in 0..d {
            let se = ((s2[(i, j)] / pf - m[(i, j)].powi(2)) / pf).sqrt();
            assert!((m[(i, j)] - target[(i, j)]).abs() <= 4.0 * se + 1e-12, "({i},{j})");
        }
    }
}

#[test]
fn decision_rule() {
    let g = DMatrix::from_diagonal(&DVector::from_row_slice(&[2.0, 1e-9]));
    let r = GramianReport::decide(g.clone(), DMatrix::zeros(2, 2), None, 0, 1e-6);
    assert!(!r.controllable);
    assert_eq!(r.eigenvalues.len(), 2);
    assert!((r.min_eigenvalue - 1e-9).abs() < 1e-15);
    let ok = GramianReport::decide(DMatrix::identity(2, 2), DMatrix::zeros(2, 2), None, 0, 1e-6);
    assert!(ok.controllable);
    // large sampling error blocks the verdict
    let cov = DMatrix::identity(4, 4) * 0.1;
    let noisy = GramianReport::decide(DMatrix::identity(2, 2) * 1e-3, DMatrix::from_element(2, 2, 1e-3), Some(&cov), 100, 1e-6);
    assert!((noisy.min_eigenvalue_se - (0.1f64 / 100.0).sqrt()).abs() < 1e-12);
    assert!(!noisy.controllable);
    assert!(GramianReport::decide(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), None, 0, 1e-6).is_zero());
}

#[test]
fn monte_carlo_gramian_on_example() {
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 8);
    let mc = estimate_gramian(&sys, &grid, &McConfig::new(20_000, 1), 1e-6).unwrap();
    assert!(mc.controllable);
    assert!((&mc.g - mc.g.transpose()).amax() < 1e-12);
    assert_eq!(mc.paths_used, 20_000);
    let zero = estimate_gramian(&assemble(&square_regulator()).unwrap(), &grid, &McConfig::new(200, 1), 1e-6).unwrap();
    assert!(zero.is_zero() && !zero.controllable);
    assert!(matches!(estimate_gramian(&sys, &grid, &McConfig::new(1, 1), 1e-6), Err(Error::InsufficientSamples { .. })));
}

#[test]
fn dual_observation_equals_steering_sampler() {
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 6);
    let eta = DVector::from_row_slice(&[0.3, -1.1]);
    let inc = path_increments(&grid, 5, 0, Noise::Gaussian);
    let dual = simulate_dual(&sys, &grid, &eta, &inc).unwrap();
    let ctl = DualControl::new(&sys, &grid, &eta).unwrap();
    for k in 0..6 {
        assert!((ctl.control(k, &inc[..k]) + &dual.observation[k]).amax() < 1e-12);
    }
    // xi starts at (eta, 0)
    assert!((dual.xi[0].rows(0, 2) - &eta).amax() == 0.0 && dual.xi[0].rows(2, 2).amax() == 0.0);
}

#[test]
fn monte_carlo_duality_against_exact_tree_value() {
    let sys = example();
    let space = TreeSpace::uniform(&sys, 6).unwrap();
    let grid = space.grid().clone();
    let eta = DVector::from_row_slice(&[1.0, 0.5]);
    let xt = terminal();
    let v = const_v(3, 0.4);
    let leaves = space.leaves_from(&xt);
    let exact = eta.dot(&tree_backward(&sys, &space, &leaves, &space.process_from(&v)).unwrap().x.levels[0][0]);
    let cfg = McConfig { noise: Noise::Rademacher, ..McConfig::new(20_000, 3) };
    let est = duality_rhs(&sys, &grid, &eta, &xt, &v, &cfg).unwrap();
    assert!((est.mean - exact).abs() <= 3.0 * est.std_error, "{} vs {exact} se {}", est.mean, est.std_error);
}

#[test]
fn apply_l_against_tree_and_linearity() {
    let sys = example();
    let space = TreeSpace::uniform(&sys, 6).unwrap();
    let xt = terminal();
    let cfg = McConfig { noise: Noise::Rademacher, ..McConfig::new(20_000, 4) };
    let l = apply_L(&sys, space.grid(), &xt, &cfg).unwrap();
    let zero = LevelProcess::zeros(3, space.step_sizes());
    let exact = tree_backward(&sys, &space, &space.leaves_from(&xt), &zero).unwrap().x.levels[0][0].clone();
    for i in 0..2 {
        assert!((l.mean[i] - exact[i]).abs() <= 3.0 * l.std_error[i] + 1e-12);
    }
    let doubled = FnTerminal(2, |w: &[f64]| xt.sample(w) * 2.0);
    let l2 = apply_L(&sys, space.grid(), &doubled, &cfg).unwrap();
    assert!((&l2.mean - &l.mean * 2.0).amax() < 1e-12);
}

#[test]
fn observer_energy_against_tree_gramian() {
    let sys = example();
    let space = TreeSpace::uniform(&sys, 6).unwrap();
    let eta = DVector::from_row_slice(&[-0.4, 0.9]);
    let g = tree_gramian(&sys, &space, 1e-6).unwrap().g;
    let cfg = McConfig { noise: Noise::Rademacher, ..McConfig::new(20_000, 5) };
    let e = observation_energy(&sys, space.grid(), &eta, &cfg).unwrap();
    let q = eta.dot(&(&g * &eta));
    assert!((e.mean - q).abs() <= 3.0 * e.std_error, "{} vs {q}", e.mean);
    let obs = tree_dual(&sys, &space, &eta).unwrap().observation;
    assert_eq!(obs.n_levels(), 6);
}

#[test]
fn state_without_noise_follows_its_mean() {
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 10);
    let x0 = DVector::from_row_slice(&[1.0, 2.0]);
    let path = simulate_state(&sys, &grid, &x0, &const_v(5, 0.25), &[0.0; 10]).unwrap();
    for k in 0..=10 {
        assert!((&path.x[k] - &path.mean[k]).amax() < 1e-14);
    }
    assert!(matches!(simulate_state(&sys, &grid, &x0, &const_v(5, 0.0), &[0.0; 3]), Err(Error::SamplerMismatch(_))));
    assert!(simulate_state(&sys, &grid, &x0, &const_v(4, 0.0), &[0.0; 10]).is_err());
}

#[test]
fn cost_of_single_deterministic_path() {
    // agent 1: H = I, Q = diag(1, 0), Q_bar = diag(0, 1), R = R_bar = 1
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 4);
    let x0 = DVector::from_row_slice(&[1.0, 1.0]);
    let ens = vec![simulate_state(&sys, &grid, &x0, &const_v(5, 0.0), &[0.0; 4]).unwrap()];
    let j = evaluate_cost(&sys, &grid, 0, &ens).unwrap();
    let mut want = ens[0].x[4].norm_squared();
    for k in 0..4 {
        want += 0.25 * (ens[0].x[k][0].powi(2) + ens[0].x[k][1].powi(2));
    }
    assert!((j - want).abs() < 1e-14);
    assert!(evaluate_cost(&sys, &grid, 2, &ens).is_err());
}

#[test]
fn ensemble_is_deterministic() {
    let sys = example();
    let grid = TimeGrid::uniform(1.0, 5);
    let x0 = DVector::from_row_slice(&[0.5, -0.5]);
    let a = simulate_ensemble(&sys, &grid, &x0, &const_v(5, 0.1), &McConfig::new(50, 2)).unwrap();
    let b = simulate_ensemble(&sys, &grid, &x0, &const_v(5, 0.1), &McConfig::new(50, 2)).unwrap();
    assert_eq!(a, b);
    assert_eq!(evaluate_cost(&sys, &grid, 1, &a).unwrap().to_bits(), evaluate_cost(&sys, &grid, 1, &b).unwrap().to_bits());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn duality_rhs_is_linear_in_eta(a in -2.0f64..2.0, b in -2.0f64..2.0, seed in 0u64..1000) {
        let sys = example();
        let grid = TimeGrid::uniform(1.0, 4);
        let cfg = McConfig::new(64, seed);
        let xt = terminal();
        let v = const_v(3, 0.3);
        let e1 = DVector::from_row_slice(&[1.0, 0.0]);
        let e2 = DVector::from_row_slice(&[0.0, 1.0]);
        let r1 = duality_rhs(&sys, &grid, &e1, &xt, &v, &cfg).unwrap().mean;
        let r2 = duality_rhs(&sys, &grid, &e2, &xt, &v, &cfg).unwrap().mean;
        let r = duality_rhs(&sys, &grid, &DVector::from_row_slice(&[a, b]), &xt, &v, &cfg).unwrap().mean;
        prop_assert!((r - a * r1 - b * r2).abs() < 1e-10 * (1.0 + r.abs()));
    }
}
