//! Non-recombining binomial tree with `±sqrt(dt)` increments. Every
//! expectation is a finite weighted sum, so forward, dual and backward
//! recursions are solved exactly.

use alloc::string::String;
use alloc::vec::Vec;
use alloc::format;

use nalgebra::{DMatrix, DVector};

use crate::assembly::AssembledSystem;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::process::{weighted_mean, LevelProcess, TrajectoryBundle};
use crate::scheme::{DualScheme, RowsPlan};
use crate::sde::{terminal_rows, ControlSampler, GramianReport, TerminalSampler};

pub const DEFAULT_MAX_DEPTH: usize = 12;
/// Column budget for explicit operator matrices.
pub const DEFAULT_OPERATOR_BUDGET: usize = 1 << 14;

/// Node `j` of level `k` has children `2j` (up) and `2j + 1` (down).
#[derive(Debug, Clone, PartialEq)]
pub struct TreeSpace {
    grid: TimeGrid,
    sqrt_dt: Vec<f64>,
    weights: Vec<Vec<f64>>,
}

impl TreeSpace {
    pub fn new(grid: TimeGrid, max_depth: usize) -> Result<Self> {
        let depth = grid.steps();
        if depth > max_depth {
            return Err(Error::BudgetExceeded { required: depth, budget: max_depth });
        }
        let sqrt_dt = (0..depth).map(|k| libm::sqrt(grid.dt(k))).collect();
        let weights = (0..=depth).map(|k| alloc::vec![libm::ldexp(1.0, -(k as i32)); 1 << k]).collect();
        Ok(Self { grid, sqrt_dt, weights })
    }

    /// Uniform tree of the given depth on the system horizon.
    pub fn uniform(sys: &AssembledSystem, depth: usize) -> Result<Self> {
        Self::new(TimeGrid::for_system(sys, depth)?, DEFAULT_MAX_DEPTH)
    }

    pub fn depth(&self) -> usize {
        self.sqrt_dt.len()
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn weights(&self, k: usize) -> &[f64] {
        &self.weights[k]
    }

    pub fn all_weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn level_size(k: usize) -> usize {
        1 << k
    }

    pub fn sqrt_dt(&self, k: usize) -> f64 {
        self.sqrt_dt[k]
    }

    pub fn knot_sizes(&self) -> Vec<usize> {
        (0..=self.depth()).map(Self::level_size).collect()
    }

    pub fn step_sizes(&self) -> Vec<usize> {
        (0..self.depth()).map(Self::level_size).collect()
    }

    /// Increments leading from the root to node `(k, j)`.
    pub fn increments_of(&self, k: usize, j: usize) -> Vec<f64> {
        (0..k)
            .map(|i| if (j >> (k - 1 - i)) & 1 == 0 { self.sqrt_dt[i] } else { -self.sqrt_dt[i] })
            .collect()
    }

    /// Path label such as `"udud"` (empty at the root).
    pub fn path_string(k: usize, j: usize) -> String {
        (0..k).map(|i| if (j >> (k - 1 - i)) & 1 == 0 { 'u' } else { 'd' }).collect()
    }

    /// Evaluates an adapted sampler on every non-leaf node.
    pub fn process_from(&self, sampler: &dyn ControlSampler) -> LevelProcess {
        LevelProcess::from_fn(sampler.dim(), self.step_sizes(), |k, j| sampler.control(k, &self.increments_of(k, j)))
    }

    /// Evaluates a terminal sampler on every leaf.
    pub fn leaves_from(&self, sampler: &dyn TerminalSampler) -> Vec<DVector<f64>> {
        let k = self.depth();
        (0..Self::level_size(k)).map(|j| sampler.sample(&self.increments_of(k, j))).collect()
    }

    fn check_steps(&self, name: &str, p: &LevelProcess, dim: usize) -> Result<()> {
        p.check_shape(name, dim, &self.step_sizes())
    }

    fn check_leaves(&self, leaves: &[DVector<f64>], dim: usize) -> Result<()> {
        let want = Self::level_size(self.depth());
        if leaves.len() != want || leaves.iter().any(|v| v.len() != dim) {
            return Err(Error::DimensionMismatch { field: "terminal values".into(), expected: (dim, want), found: (leaves.first().map_or(0, |v| v.len()), leaves.len()) });
        }
        Ok(())
    }
}

/// Forward state on the tree with its level means.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeState {
    pub x: LevelProcess,
    pub mean: Vec<DVector<f64>>,
}

/// Explicit Euler for the controlled state; `controls` holds the full
/// control `(u0, u_1, ..., u_N)` on non-leaf nodes.
pub fn tree_forward_state(sys: &AssembledSystem, space: &TreeSpace, x0: &DVector<f64>, controls: &LevelProcess) -> Result<TreeState> {
    let m = sys.m0 + sys.m_agents();
    space.check_steps("controls", controls, m)?;
    if x0.len() != sys.n {
        return Err(Error::DimensionMismatch { field: "x0".into(), expected: (sys.n, 1), found: (x0.len(), 1) });
    }
    let grid = space.grid();
    let mut levels = alloc::vec![alloc::vec![x0.clone()]];
    let mut mean = alloc::vec![x0.clone()];
    for k in 0..space.depth() {
        let raw = &sys.at(grid.t(k)).raw;
        let (dt, sdt) = (grid.dt(k), space.sqrt_dt(k));
        let w = space.weights(k);
        let cur = &levels[k];
        let xb = &mean[k];
        let ub = controls.mean(k, w);
        let drift_mean = &raw.a_bar * xb + &raw.b_bar * &ub;
        let diff_mean = &raw.c_bar * xb + &raw.d_bar * &ub;
        let mut next = Vec::with_capacity(2 * cur.len());
        for (x, u) in cur.iter().zip(&controls.levels[k]) {
            let base = x + (&raw.a * x + &raw.b * u + &drift_mean) * dt;
            let diff = (&raw.c * x + &raw.d * u + &diff_mean) * sdt;
            next.push(&base + &diff);
            next.push(base - diff);
        }
        mean.push(weighted_mean(sys.n, &next, space.weights(k + 1)));
        levels.push(next);
    }
    Ok(TreeState { x: LevelProcess { dim: sys.n, levels }, mean })
}

/// Rows recursion evaluated on every node.
#[derive(Debug, Clone)]
pub struct TreeRows {
    pub plan: RowsPlan,
    /// Rows at every node, on knots.
    pub rows: Vec<Vec<DMatrix<f64>>>,
    /// Observation `R~ B + M~ B_bar` on every non-leaf node.
    pub obs: Vec<Vec<DMatrix<f64>>>,
}

pub fn tree_rows(sys: &AssembledSystem, space: &TreeSpace, start: &DMatrix<f64>) -> Result<TreeRows> {
    let plan = DualScheme::new(sys, space.grid())?.plan(start);
    let mut rows = alloc::vec![alloc::vec![start.clone()]];
    let mut obs = Vec::with_capacity(space.depth());
    for k in 0..space.depth() {
        let sdt = space.sqrt_dt(k);
        let mut next = Vec::with_capacity(2 * rows[k].len());
        let mut o = Vec::with_capacity(rows[k].len());
        for r in &rows[k] {
            let up = plan.step(k, r, sdt);
            let down = plan.step(k, r, -sdt);
            next.push(up.next);
            next.push(down.next);
            o.push(up.obs);
        }
        rows.push(next);
        obs.push(o);
    }
    Ok(TreeRows { plan, rows, obs })
}

/// Dual flow started at `eta0` on the tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeDual {
    pub xi: LevelProcess,
    /// Observer output on non-leaf nodes.
    pub observation: LevelProcess,
    /// Terminal functional on leaves.
    pub terminal: Vec<DVector<f64>>,
}

pub fn tree_dual(sys: &AssembledSystem, space: &TreeSpace, eta0: &DVector<f64>) -> Result<TreeDual> {
    let (n, d) = (sys.n, sys.dim());
    let start = crate::sde::eta_rows(eta0, n, d);
    let tr = tree_rows(sys, space, &start)?;
    let col = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    let xi = LevelProcess { dim: d, levels: tr.rows.iter().map(|l| l.iter().map(|r| col(&r.transpose())).collect()).collect() };
    let observation =
        LevelProcess { dim: sys.m0, levels: tr.obs.iter().map(|l| l.iter().map(|o| -col(&o.transpose())).collect()).collect() };
    let mean_t = tr.plan.mean_knots.last().unwrap();
    let terminal = tr.rows[space.depth()].iter().map(|r| col(&terminal_rows(sys, r, mean_t).transpose())).collect();
    Ok(TreeDual { xi, observation, terminal })
}

fn terminal_y(sys: &AssembledSystem, space: &TreeSpace, x_t: &[DVector<f64>]) -> Vec<DVector<f64>> {
    let (h, h_bar) = sys.terminal_weights();
    let xb = weighted_mean(sys.n, x_t, space.weights(space.depth()));
    let yb = h_bar * xb;
    x_t.iter()
        .map(|x| {
            let mut y = DVector::zeros(sys.dim());
            y.rows_mut(0, sys.n).copy_from(x);
            y.rows_mut(sys.n, sys.dim() - sys.n).copy_from(&(h * x + &yb));
            y
        })
        .collect()
}

/// Implicit backward sweep for the backward system with terminal state
/// `x_t` on leaves and control `v` on non-leaf nodes.
pub fn tree_backward(sys: &AssembledSystem, space: &TreeSpace, x_t: &[DVector<f64>], v: &LevelProcess) -> Result<TrajectoryBundle> {
    space.check_leaves(x_t, sys.n)?;
    space.check_steps("v", v, sys.m0)?;
    let scheme = DualScheme::new(sys, space.grid())?;
    let (n, d) = (sys.n, sys.dim());
    let depth = space.depth();
    let mut ys: Vec<Vec<DVector<f64>>> = alloc::vec![Vec::new(); depth + 1];
    let mut zs: Vec<Vec<DVector<f64>>> = alloc::vec![Vec::new(); depth];
    ys[depth] = terminal_y(sys, space, x_t);
    for k in (0..depth).rev() {
        let bw = &sys.pieces[scheme.piece(k)].backward;
        let (inv, inv_hat) = scheme.inverses(k);
        let (dt, sdt) = (scheme.dt(k), scheme.sqrt_dt(k));
        let w = space.weights(k);
        let size = TreeSpace::level_size(k);
        let child = &ys[k + 1];
        let ey: Vec<DVector<f64>> = (0..size).map(|j| (&child[2 * j] + &child[2 * j + 1]) * 0.5).collect();
        let z: Vec<DVector<f64>> = (0..size).map(|j| (&child[2 * j] - &child[2 * j + 1]) / (2.0 * sdt)).collect();
        let zb = weighted_mean(d, &z, w);
        let vb = v.mean(k, w);
        let eyb = weighted_mean(d, &ey, w);
        let yb = inv_hat * (eyb - (bw.c_hat() * &zb + bw.b_hat() * &vb) * dt);
        let common = (&bw.a_bar * &yb + &bw.c_bar * &zb + &bw.b_bar * &vb) * dt;
        ys[k] = (0..size).map(|j| inv * (&ey[j] - &common - (&bw.c * &z[j] + &bw.b * &v.levels[k][j]) * dt)).collect();
        zs[k] = z;
    }
    let split = |levels: &[Vec<DVector<f64>>], off: usize, len: usize| LevelProcess {
        dim: len,
        levels: levels.iter().map(|l| l.iter().map(|y| y.rows(off, len).clone_owned()).collect()).collect(),
    };
    Ok(TrajectoryBundle {
        times: space.grid().knots().to_vec(),
        weights: space.all_weights().to_vec(),
        x: split(&ys, 0, n),
        y_agents: split(&ys, n, d - n),
        z_agents: split(&zs, n, d - n),
        q: Some(split(&zs, 0, n)),
        v: Some(v.clone()),
        u0: None,
    })
}

fn stacked_y(bundle: &TrajectoryBundle, k: usize, j: usize) -> DVector<f64> {
    let (x, y) = (&bundle.x.levels[k][j], &bundle.y_agents.levels[k][j]);
    DVector::from_iterator(x.len() + y.len(), x.iter().chain(y.iter()).cloned())
}

/// Largest residual of the discrete backward recursion (drift line and
/// martingale line) over all nodes, plus the terminal condition.
pub fn tree_backward_residual(sys: &AssembledSystem, space: &TreeSpace, bundle: &TrajectoryBundle) -> Result<f64> {
    let q = bundle.q.as_ref().ok_or_else(|| Error::IncompleteBundle("q missing".into()))?;
    let v = bundle.v.as_ref().ok_or_else(|| Error::IncompleteBundle("v missing".into()))?;
    let (n, d) = (sys.n, sys.dim());
    let depth = space.depth();
    let leaves: Vec<DVector<f64>> = bundle.x.levels[depth].clone();
    let term = terminal_y(sys, space, &leaves);
    let mut res = (0..term.len()).map(|j| (stacked_y(bundle, depth, j) - &term[j]).amax()).fold(0.0, f64::max);
    let grid = space.grid();
    for k in 0..depth {
        let bw = &sys.at(grid.t(k)).backward;
        let (dt, sdt) = (grid.dt(k), space.sqrt_dt(k));
        let w = space.weights(k);
        let size = TreeSpace::level_size(k);
        let y: Vec<DVector<f64>> = (0..size).map(|j| stacked_y(bundle, k, j)).collect();
        let z: Vec<DVector<f64>> = (0..size)
            .map(|j| {
                let (a, b) = (&q.levels[k][j], &bundle.z_agents.levels[k][j]);
                DVector::from_iterator(d, a.iter().chain(b.iter()).cloned())
            })
            .collect();
        let (yb, zb, vb) = (weighted_mean(d, &y, w), weighted_mean(d, &z, w), v.mean(k, w));
        for j in 0..size {
            let up = stacked_y(bundle, k + 1, 2 * j);
            let down = stacked_y(bundle, k + 1, 2 * j + 1);
            let drift = &bw.a * &y[j] + &bw.a_bar * &yb + &bw.c * &z[j] + &bw.c_bar * &zb + &bw.b * &v.levels[k][j] + &bw.b_bar * &vb;
            let r1 = (&y[j] - (&up + &down) * 0.5 + drift * dt).amax();
            let r2 = (&z[j] * (2.0 * sdt) - (up - down)).amax();
            res = res.max(r1).max(r2);
        }
    }
    let _ = n;
    Ok(res)
}

/// Explicit matrices of the initial-value map `x(0) = K v + L x_T`.
/// Columns of `k_mat` run over (level, node, component) of `v`; columns of
/// `l_mat` over (leaf, component) of `x_T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeOperators {
    pub k_mat: DMatrix<f64>,
    pub l_mat: DMatrix<f64>,
}

impl TreeOperators {
    pub fn flatten_v(v: &LevelProcess) -> DVector<f64> {
        DVector::from_iterator(
            v.levels.iter().map(|l| l.len() * v.dim).sum(),
            v.levels.iter().flat_map(|l| l.iter().flat_map(|x| x.iter().cloned())),
        )
    }

    pub fn flatten_leaves(x_t: &[DVector<f64>]) -> DVector<f64> {
        DVector::from_iterator(x_t.iter().map(|x| x.len()).sum(), x_t.iter().flat_map(|x| x.iter().cloned()))
    }

    pub fn apply(&self, v: &LevelProcess, x_t: &[DVector<f64>]) -> DVector<f64> {
        &self.k_mat * Self::flatten_v(v) + &self.l_mat * Self::flatten_leaves(x_t)
    }
}

/// Builds both operators column by column from unit inputs fed through
/// [`tree_backward`].
pub fn tree_operators(sys: &AssembledSystem, space: &TreeSpace, budget: usize) -> Result<TreeOperators> {
    let (n, m0, depth) = (sys.n, sys.m0, space.depth());
    let v_cols = ((1usize << depth) - 1) * m0;
    let l_cols = (1usize << depth) * n;
    if v_cols + l_cols > budget {
        return Err(Error::BudgetExceeded { required: v_cols + l_cols, budget });
    }
    let zero_v = LevelProcess::zeros(m0, space.step_sizes());
    let zero_x = alloc::vec![DVector::zeros(n); 1 << depth];
    let mut k_mat = DMatrix::zeros(n, v_cols);
    let mut l_mat = DMatrix::zeros(n, l_cols);
    let mut col = 0;
    for k in 0..depth {
        for j in 0..TreeSpace::level_size(k) {
            for c in 0..m0 {
                let mut v = zero_v.clone();
                v.levels[k][j][c] = 1.0;
                k_mat.set_column(col, &tree_backward(sys, space, &zero_x, &v)?.x.levels[0][0]);
                col += 1;
            }
        }
    }
    for j in 0..(1 << depth) {
        for c in 0..n {
            let mut x = zero_x.clone();
            x[j][c] = 1.0;
            l_mat.set_column(j * n + c, &tree_backward(sys, space, &x, &zero_v)?.x.levels[0][0]);
        }
    }
    Ok(TreeOperators { k_mat, l_mat })
}

/// Exact Gramian on the tree (left-endpoint quadrature).
pub fn tree_gramian(sys: &AssembledSystem, space: &TreeSpace, tol: f64) -> Result<GramianReport> {
    let (n, d) = (sys.n, sys.dim());
    let tr = tree_rows(sys, space, &DMatrix::identity(n, d))?;
    let mut g = DMatrix::zeros(n, n);
    for (k, level) in tr.obs.iter().enumerate() {
        let dt = tr.plan.dt(k);
        for (o, w) in level.iter().zip(space.weights(k)) {
            g += o * o.transpose() * (w * dt);
        }
    }
    Ok(GramianReport::decide(g, DMatrix::zeros(n, n), None, 0, tol))
}

/// Exact cost of agent `agent` (0-based) for a state on the tree and the
/// full control process.
pub fn tree_cost(sys: &AssembledSystem, space: &TreeSpace, agent: usize, state: &TreeState, controls: &LevelProcess) -> Result<f64> {
    if agent >= sys.n_agents {
        return Err(Error::OutOfRange { index: agent + 1, max: sys.n_agents });
    }
    let raw0 = &sys.pieces[0].raw;
    let off = sys.m0 + raw0.agent_dims[..agent].iter().sum::<usize>();
    let mi = raw0.agent_dims[agent];
    let quad = |m: &DMatrix<f64>, v: &DVector<f64>| (v.transpose() * m * v)[(0, 0)];
    let depth = space.depth();
    let wt = space.weights(depth);
    let mut j: f64 = state.x.levels[depth].iter().zip(wt).map(|(x, w)| w * quad(&raw0.h[agent], x)).sum();
    j += quad(&raw0.h_bar[agent], &state.mean[depth]);
    let grid = space.grid();
    for k in 0..depth {
        let raw = &sys.at(grid.t(k)).raw;
        let w = space.weights(k);
        let ui: Vec<DVector<f64>> = controls.levels[k].iter().map(|u| u.rows(off, mi).clone_owned()).collect();
        let e: f64 = state.x.levels[k]
            .iter()
            .zip(&ui)
            .zip(w)
            .map(|((x, u), w)| w * (quad(&raw.q[agent], x) + quad(&raw.r[agent], u)))
            .sum();
        let um = weighted_mean(mi, &ui, w);
        j += grid.dt(k) * (e + quad(&raw.q_bar[agent], &state.mean[k]) + quad(&raw.r_bar[agent], &um));
    }
    Ok(j)
}

/// Least-squares fit `J(eps) = c0 + c1 eps + c2 eps^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct NashFit {
    pub c0: f64,
    pub c1: f64,
    pub c2: f64,
    /// Largest fit residual relative to `max(1, |J|)`.
    pub residual: f64,
    pub values: Vec<(f64, f64)>,
}

/// Concatenates regulator and agents' controls.
pub fn join_controls(u0: &LevelProcess, agents: &LevelProcess) -> LevelProcess {
    u0.map(u0.dim + agents.dim, |k, j, a| {
        let b = &agents.levels[k][j];
        DVector::from_iterator(a.len() + b.len(), a.iter().chain(b.iter()).cloned())
    })
}

/// Perturbs agent `agent`'s control by `eps * du` and fits the cost curve.
#[allow(clippy::too_many_arguments)]
pub fn tree_nash_check(
    sys: &AssembledSystem,
    space: &TreeSpace,
    x0: &DVector<f64>,
    u0: &LevelProcess,
    agents: &LevelProcess,
    agent: usize,
    du: &LevelProcess,
    eps: &[f64],
) -> Result<NashFit> {
    if agent >= sys.n_agents {
        return Err(Error::OutOfRange { index: agent + 1, max: sys.n_agents });
    }
    space.check_steps("u0", u0, sys.m0)?;
    space.check_steps("agents' controls", agents, sys.m_agents())?;
    let mi = sys.pieces[0].raw.agent_dims[agent];
    space.check_steps("perturbation", du, mi)?;
    if eps.len() < 3 {
        return Err(Error::InvalidMatrix(format!("{} perturbation sizes given, need at least 3", eps.len())));
    }
    let off = sys.pieces[0].raw.agent_dims[..agent].iter().sum::<usize>();
    let mut values = Vec::with_capacity(eps.len());
    for &e in eps {
        let pert = agents.map(agents.dim, |k, j, a| {
            let mut a = a.clone();
            let mut blk = a.rows_mut(off, mi);
            blk += &du.levels[k][j] * e;
            a
        });
        let u = join_controls(u0, &pert);
        let state = tree_forward_state(sys, space, x0, &u)?;
        values.push((e, tree_cost(sys, space, agent, &state, &u)?));
    }
    let design = DMatrix::from_fn(eps.len(), 3, |r, c| libm::pow(eps[r], c as f64));
    let rhs = DVector::from_iterator(eps.len(), values.iter().map(|v| v.1));
    let ata = design.transpose() * &design;
    let atb = design.transpose() * &rhs;
    let coef = crate::field::solve(&ata, &DMatrix::from_column_slice(3, 1, atb.as_slice()))
        .ok_or_else(|| Error::Singular("perturbation sizes must be distinct".into()))?;
    let fit = &design * &coef;
    let scale = values.iter().map(|v| v.1.abs()).fold(1.0, f64::max);
    let residual = (0..eps.len()).map(|r| (fit[(r, 0)] - rhs[r]).abs()).fold(0.0, f64::max) / scale;
    Ok(NashFit { c0: coef[(0, 0)], c1: coef[(1, 0)], c2: coef[(2, 0)], residual, values })
}
