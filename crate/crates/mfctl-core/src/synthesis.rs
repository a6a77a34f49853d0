//! Steering control, regulator control recovery, agents' equilibrium and
//! the end-to-end regulator pipeline.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::assembly::{assemble, bundle_qv_to_u0, AssembledSystem};
use crate::error::{Assumption, Error, Result};
use crate::field::solve;
use crate::grid::TimeGrid;
use crate::kalman::{controllable_subspace, KalmanReport};
use crate::model::{check_assumptions, require, AssumptionReport, GameSpec};
use crate::process::{LevelProcess, TrajectoryBundle};
use crate::sde::{self, DualControl, GramianReport, McConfig, TerminalSampler};
use crate::tree::{self, NashFit, TreeSpace};

/// Minimiser `eta0* = -G^{-1}(x0 - L x_T)` and the minimum value.
pub fn solve_min(g: &GramianReport, x0: &DVector<f64>, lx_t: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    if !g.controllable {
        return Err(Error::NotExactlyControllable { min_eigenvalue: g.min_eigenvalue, tol: g.tol });
    }
    let d = x0 - lx_t;
    let gd = solve(&g.g, &DMatrix::from_column_slice(d.len(), 1, d.as_slice()))
        .ok_or(Error::NotExactlyControllable { min_eigenvalue: g.min_eigenvalue, tol: g.tol })?;
    let gd = gd.column(0).clone_owned();
    let g_min = -gd.dot(&d);
    Ok((-gd, g_min))
}

/// Steering control on the tree from the dual flow started at `eta0`.
pub fn tree_steering_control(sys: &AssembledSystem, space: &TreeSpace, eta0: &DVector<f64>) -> Result<LevelProcess> {
    let dual = tree::tree_dual(sys, space, eta0)?;
    Ok(dual.observation.map(sys.m0, |_, _, o| -o))
}

/// Same control from the fundamental solution: `(Phi~ B + M~ B_bar)^T (I 0)^T eta0`.
pub fn tree_steering_control_phi(sys: &AssembledSystem, space: &TreeSpace, eta0: &DVector<f64>) -> Result<LevelProcess> {
    let (n, d) = (sys.n, sys.dim());
    let tr = tree::tree_rows(sys, space, &DMatrix::identity(d, d))?;
    let proj = DMatrix::<f64>::identity(n, d);
    let levels = tr.obs.iter().map(|l| l.iter().map(|o| (&proj * o).transpose() * eta0).collect()).collect();
    Ok(LevelProcess { dim: sys.m0, levels })
}

/// Monte Carlo steering control, evaluated along any increment path.
pub fn mc_steering_control<'a>(sys: &'a AssembledSystem, grid: &TimeGrid, eta0: &DVector<f64>) -> Result<DualControl<'a>> {
    DualControl::new(sys, grid, eta0)
}

/// Regulator control from a backward-system bundle; returns the control
/// and the largest mean and centred consistency residuals.
pub fn recover_u0(sys: &AssembledSystem, bundle: &TrajectoryBundle) -> Result<(LevelProcess, f64, f64)> {
    bundle_qv_to_u0(sys, bundle)
}

fn require_h2(sys: &AssembledSystem, k: usize) -> Result<()> {
    let red = &sys.pieces[k].reduced;
    if red.r_inv.iter().chain(red.r_hat_inv.iter()).all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::AssumptionViolated { assumption: Assumption::H2, detail: "agent weights not invertible".into() })
    }
}

/// Agents' equilibrium controls from the adjoint pair of a bundle.
pub fn nash_point(sys: &AssembledSystem, bundle: &TrajectoryBundle) -> Result<LevelProcess> {
    let sizes = bundle.step_sizes();
    let nn = sys.dim() - sys.n;
    bundle.z_agents.check_shape("z", nn, &sizes)?;
    let mut out = LevelProcess::zeros(sys.m_agents(), sizes.iter().cloned());
    for k in 0..bundle.steps() {
        let piece = sys.starts.iter().rposition(|&s| s <= bundle.times[k]).unwrap_or(0);
        require_h2(sys, piece)?;
        let p = &sys.pieces[piece];
        let st = &p.stacked;
        let w = &bundle.weights[k];
        let (yb, zb) = (bundle.y_agents.mean(k, w), bundle.z_agents.mean(k, w));
        let b_hat = &st.b + &st.b_bar;
        let d_hat = &st.d + &st.d_bar;
        let mean_part = -&p.reduced.r_hat_inv * (b_hat.transpose() * &yb + d_hat.transpose() * &zb);
        for j in 0..sizes[k] {
            let y = &bundle.y_agents.levels[k][j] - &yb;
            let z = &bundle.z_agents.levels[k][j] - &zb;
            out.levels[k][j] = -&p.reduced.r_inv * (st.b.transpose() * y + st.d.transpose() * z) + &mean_part;
        }
    }
    Ok(out)
}

/// Largest residual of the algebraic equilibrium condition
/// `R u + R_bar E u + B~^T y + ... = 0` over all nodes.
pub fn hamiltonian_residual(sys: &AssembledSystem, bundle: &TrajectoryBundle, agents: &LevelProcess) -> f64 {
    let mut res = 0.0f64;
    for k in 0..bundle.steps() {
        let st = &sys.at(bundle.times[k]).stacked;
        let w = &bundle.weights[k];
        let (yb, zb, ub) = (bundle.y_agents.mean(k, w), bundle.z_agents.mean(k, w), agents.mean(k, w));
        let common = &st.r_bar * &ub + st.b_bar.transpose() * &yb + st.d_bar.transpose() * &zb;
        for j in 0..w.len() {
            let r = &st.r * &agents.levels[k][j]
                + st.b.transpose() * &bundle.y_agents.levels[k][j]
                + st.d.transpose() * &bundle.z_agents.levels[k][j]
                + &common;
            res = res.max(r.amax());
        }
    }
    res
}

/// Where the pipeline runs.
#[derive(Debug, Clone, PartialEq)]
pub enum Backend {
    Tree { depth: usize },
    MonteCarlo { steps: usize, mc: McConfig },
}

/// Perturbation test of one agent's first-order condition.
#[derive(Debug, Clone, PartialEq)]
pub struct NashProbe {
    /// 0-based agent index.
    pub agent: usize,
    pub seed: u64,
    pub eps: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineParams {
    pub backend: Backend,
    pub gram_tol: f64,
    pub kalman_tol_rel: f64,
    pub delta: f64,
    pub nash: Option<NashProbe>,
}

impl PipelineParams {
    pub fn tree(depth: usize) -> Self {
        Self {
            backend: Backend::Tree { depth },
            gram_tol: sde::DEFAULT_GRAM_TOL,
            kalman_tol_rel: crate::blocktensor::DEFAULT_TOL_REL,
            delta: crate::model::DEFAULT_DELTA,
            nash: Some(NashProbe { agent: 0, seed: 0, eps: alloc::vec![-1.0, -0.5, 0.5, 1.0] }),
        }
    }

    pub fn monte_carlo(steps: usize, mc: McConfig) -> Self {
        Self { backend: Backend::MonteCarlo { steps, mc }, nash: None, ..Self::tree(0) }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Verification {
    /// `|x*(0) - x0|` (max norm).
    pub initial_residual: f64,
    /// Standard error of the initial residual (Monte Carlo only).
    pub initial_residual_se: f64,
    /// `|x*(T) - x_T|` over leaves.
    pub terminal_residual: Option<f64>,
    /// Gap between the bundle state and the forward re-simulation under
    /// the recovered controls.
    pub resimulation_residual: Option<f64>,
    pub qv_mean_residual: Option<f64>,
    pub qv_centered_residual: Option<f64>,
    pub hamiltonian_residual: Option<f64>,
    /// Gap between the dual-flow and fundamental-solution forms of the
    /// steering control.
    pub steering_form_gap: Option<f64>,
    pub backward_residual: Option<f64>,
    pub nash: Option<NashFit>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPlan {
    pub backend: String,
    pub assumptions: AssumptionReport,
    pub kalman: Option<KalmanReport>,
    pub gramian: GramianReport,
    pub x0: DVector<f64>,
    /// `x*(0; x_T, 0)`.
    pub lx_t: DVector<f64>,
    pub lx_t_se: Option<DVector<f64>>,
    pub eta0: DVector<f64>,
    pub g_min: f64,
    /// Tree backend only.
    pub v: Option<LevelProcess>,
    pub u0: Option<LevelProcess>,
    pub u_nash: Option<LevelProcess>,
    pub bundle: Option<TrajectoryBundle>,
    pub verification: Verification,
}

fn check_pipeline_assumptions(spec: &GameSpec, delta: f64) -> Result<AssumptionReport> {
    let report = check_assumptions(spec, delta);
    require(&report, &[Assumption::H2, Assumption::H4])?;
    if !report.h1.holds && !report.h3_user_asserted {
        return Err(Error::AssumptionViolated {
            assumption: Assumption::H1,
            detail: "H1 fails and equilibrium uniqueness was not asserted".into(),
        });
    }
    Ok(report)
}

/// Random adapted perturbation on the tree.
pub fn random_perturbation(space: &TreeSpace, dim: usize, seed: u64) -> LevelProcess {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LevelProcess::from_fn(dim, space.step_sizes(), |_, _| DVector::from_fn(dim, |_, _| rng.random::<f64>() * 2.0 - 1.0))
}

/// The four-step regulator pipeline: controllability verdict, steering
/// control, regulator control, agents' equilibrium, with verification.
pub fn run_pipeline(spec: &GameSpec, x0: &DVector<f64>, x_t: &dyn TerminalSampler, params: &PipelineParams) -> Result<SteeringPlan> {
    let assumptions = check_pipeline_assumptions(spec, params.delta)?;
    let sys = assemble(spec)?;
    if x0.len() != sys.n || x_t.dim() != sys.n {
        return Err(Error::SamplerMismatch(format!("initial and terminal states must have dimension {}", sys.n)));
    }
    let kalman = if sys.is_time_invariant() { Some(controllable_subspace(&sys, params.kalman_tol_rel, true)?) } else { None };
    match &params.backend {
        Backend::Tree { depth } => tree_pipeline(&sys, x0, x_t, *depth, params, assumptions, kalman),
        Backend::MonteCarlo { steps, mc } => mc_pipeline(&sys, x0, x_t, *steps, mc, params, assumptions, kalman),
    }
}

fn tree_pipeline(
    sys: &AssembledSystem,
    x0: &DVector<f64>,
    x_t: &dyn TerminalSampler,
    depth: usize,
    params: &PipelineParams,
    assumptions: AssumptionReport,
    kalman: Option<KalmanReport>,
) -> Result<SteeringPlan> {
    let space = TreeSpace::uniform(sys, depth)?;
    let gramian = tree::tree_gramian(sys, &space, params.gram_tol)?;
    let leaves = space.leaves_from(x_t);
    let zero_v = LevelProcess::zeros(sys.m0, space.step_sizes());
    let lx_t = tree::tree_backward(sys, &space, &leaves, &zero_v)?.x.levels[0][0].clone();
    let (eta0, g_min) = solve_min(&gramian, x0, &lx_t)?;
    let v = tree_steering_control(sys, &space, &eta0)?;
    let v_phi = tree_steering_control_phi(sys, &space, &eta0)?;
    let mut bundle = tree::tree_backward(sys, &space, &leaves, &v)?;
    let backward_residual = tree::tree_backward_residual(sys, &space, &bundle)?;
    let (u0, rm, rc) = recover_u0(sys, &bundle)?;
    bundle.u0 = Some(u0.clone());
    let u_nash = nash_point(sys, &bundle)?;
    let ham = hamiltonian_residual(sys, &bundle, &u_nash);
    let controls = tree::join_controls(&u0, &u_nash);
    let state = tree::tree_forward_state(sys, &space, x0, &controls)?;
    let resim = state.x.max_abs_diff(&bundle.x);
    let terminal = bundle.x.levels[depth].iter().zip(&leaves).map(|(a, b)| (a - b).amax()).fold(0.0, f64::max);
    let nash = match &params.nash {
        Some(p) => {
            let mi = sys.pieces[0].raw.agent_dims.get(p.agent).cloned().ok_or(Error::OutOfRange { index: p.agent + 1, max: sys.n_agents })?;
            let du = random_perturbation(&space, mi, p.seed);
            Some(tree::tree_nash_check(sys, &space, x0, &u0, &u_nash, p.agent, &du, &p.eps)?)
        }
        None => None,
    };
    let verification = Verification {
        initial_residual: (&bundle.x.levels[0][0] - x0).amax(),
        initial_residual_se: 0.0,
        terminal_residual: Some(terminal),
        resimulation_residual: Some(resim),
        qv_mean_residual: Some(rm),
        qv_centered_residual: Some(rc),
        hamiltonian_residual: Some(ham),
        steering_form_gap: Some(v.max_abs_diff(&v_phi)),
        backward_residual: Some(backward_residual),
        nash,
    };
    Ok(SteeringPlan {
        backend: format!("tree(depth={depth})"),
        assumptions,
        kalman,
        gramian,
        x0: x0.clone(),
        lx_t,
        lx_t_se: None,
        eta0,
        g_min,
        v: Some(v),
        u0: Some(u0),
        u_nash: Some(u_nash),
        bundle: Some(bundle),
        verification,
    })
}

#[allow(clippy::too_many_arguments)]
fn mc_pipeline(
    sys: &AssembledSystem,
    x0: &DVector<f64>,
    x_t: &dyn TerminalSampler,
    steps: usize,
    mc: &McConfig,
    params: &PipelineParams,
    assumptions: AssumptionReport,
    kalman: Option<KalmanReport>,
) -> Result<SteeringPlan> {
    let grid = TimeGrid::for_system(sys, steps)?;
    let gramian = sde::estimate_gramian(sys, &grid, mc, params.gram_tol)?;
    let lx = sde::apply_L(sys, &grid, x_t, mc)?;
    let (eta0, g_min) = solve_min(&gramian, x0, &lx.mean)?;
    let control = mc_steering_control(sys, &grid, &eta0)?;
    // x*(0) under (x_T, v*) coordinatewise by duality on fresh paths
    let check = McConfig { seed: mc.seed.wrapping_add(1), ..*mc };
    let mut x_start = DVector::zeros(sys.n);
    let mut se = 0.0f64;
    for i in 0..sys.n {
        let e = sde::duality_rhs(sys, &grid, &DVector::from_fn(sys.n, |r, _| if r == i { 1.0 } else { 0.0 }), x_t, &control, &check)?;
        x_start[i] = e.mean;
        se = se.max(e.std_error);
    }
    let verification = Verification { initial_residual: (&x_start - x0).amax(), initial_residual_se: se, ..Default::default() };
    Ok(SteeringPlan {
        backend: format!("monte-carlo(steps={steps}, paths={}, seed={})", mc.paths, mc.seed),
        assumptions,
        kalman,
        gramian,
        x0: x0.clone(),
        lx_t: lx.mean,
        lx_t_se: Some(lx.std_error),
        eta0,
        g_min,
        v: None,
        u0: None,
        u_nash: None,
        bundle: None,
        verification,
    })
}

/// Empirical depth-doubling diagnostic: `(depth, |c1|)` pairs for the
/// same perturbation seed.
pub fn nash_depth_diagnostic(spec: &GameSpec, x0: &DVector<f64>, x_t: &dyn TerminalSampler, depths: &[usize], probe: &NashProbe) -> Result<Vec<(usize, f64)>> {
    depths
        .iter()
        .map(|&d| {
            let params = PipelineParams { nash: Some(probe.clone()), ..PipelineParams::tree(d) };
            let plan = run_pipeline(spec, x0, x_t, &params)?;
            Ok((d, plan.verification.nash.map_or(0.0, |f| f.c1.abs())))
        })
        .collect()
}
