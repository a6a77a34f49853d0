//! Monte Carlo engine: fundamental solution, Gramian, dual process,
//! duality-based operator application, forward state and costs.

pub mod expm;

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::assembly::AssembledSystem;
use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::scheme::DualScheme;

/// Default decision threshold on the smallest Gramian eigenvalue.
pub const DEFAULT_GRAM_TOL: f64 = 1e-6;
/// Standard errors subtracted before the Monte Carlo decision.
pub const SIGMA_RULE: f64 = 3.0;
const CHUNK: usize = 512;

/// Law of the normalised Brownian increments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Noise {
    Gaussian,
    /// Symmetric ±1 steps.
    Rademacher,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McConfig {
    pub paths: usize,
    pub seed: u64,
    pub noise: Noise,
}

impl McConfig {
    pub fn new(paths: usize, seed: u64) -> Self {
        Self { paths, seed, noise: Noise::Gaussian }
    }
}

/// Increments of path `path`: stream `path` of a ChaCha generator keyed by
/// the root seed, so each path is reproducible on its own.
pub fn path_increments(grid: &TimeGrid, seed: u64, path: usize, noise: Noise) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64);
    (0..grid.steps())
        .map(|k| {
            let z: f64 = match noise {
                Noise::Gaussian => rng.sample(StandardNormal),
                Noise::Rademacher => {
                    if rng.random::<bool>() {
                        1.0
                    } else {
                        -1.0
                    }
                }
            };
            z * libm::sqrt(grid.dt(k))
        })
        .collect()
}

/// Sums per-path contributions in fixed chunks combined in chunk order, so
/// the result does not depend on how chunks are scheduled.
pub fn sum_over_paths<S, Z, F, M>(paths: usize, zero: Z, add_path: F, merge: M) -> S
where
    S: Send,
    Z: Fn() -> S + Sync,
    F: Fn(&mut S, usize) + Sync,
    M: Fn(&mut S, S),
{
    let chunks = paths.div_ceil(CHUNK);
    let run = |c: usize| {
        let mut s = zero();
        for p in c * CHUNK..((c + 1) * CHUNK).min(paths) {
            add_path(&mut s, p);
        }
        s
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<S> = {
        use rayon::prelude::*;
        (0..chunks).into_par_iter().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<S> = (0..chunks).map(run).collect();
    let mut total = zero();
    for p in parts {
        merge(&mut total, p);
    }
    total
}

/// Sample mean with its standard error.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VecEstimate {
    pub mean: DVector<f64>,
    pub std_error: DVector<f64>,
}

#[derive(Default)]
struct Moments {
    n: usize,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl Moments {
    fn zeros(dim: usize) -> Self {
        Self { n: 0, s1: alloc::vec![0.0; dim], s2: alloc::vec![0.0; dim] }
    }
    fn add(&mut self, x: &[f64]) {
        self.n += 1;
        for (i, v) in x.iter().enumerate() {
            self.s1[i] += v;
            self.s2[i] += v * v;
        }
    }
    fn merge(&mut self, o: Moments) {
        self.n += o.n;
        for i in 0..self.s1.len() {
            self.s1[i] += o.s1[i];
            self.s2[i] += o.s2[i];
        }
    }
    fn finish(&self) -> VecEstimate {
        let p = self.n as f64;
        let mean = DVector::from_iterator(self.s1.len(), self.s1.iter().map(|s| s / p));
        let se = DVector::from_iterator(
            self.s1.len(),
            self.s1.iter().zip(&self.s2).map(|(s1, s2)| {
                let m = s1 / p;
                let var = ((s2 / p - m * m) * p / (p - 1.0)).max(0.0);
                libm::sqrt(var / p)
            }),
        );
        VecEstimate { mean, std_error: se }
    }
}

fn check_paths(paths: usize) -> Result<()> {
    if paths < 2 {
        Err(Error::InsufficientSamples { paths })
    } else {
        Ok(())
    }
}

/// Random terminal value as a function of the whole increment path.
pub trait TerminalSampler: Sync {
    fn dim(&self) -> usize;
    fn sample(&self, increments: &[f64]) -> DVector<f64>;
}

/// Control process: the value on step `k` sees only the first `k`
/// increments, which is how adaptedness is enforced.
pub trait ControlSampler: Sync {
    fn dim(&self) -> usize;
    fn control(&self, k: usize, past: &[f64]) -> DVector<f64>;
    /// Expectation of the control on step `k`.
    fn mean(&self, k: usize) -> DVector<f64>;
}

pub struct FnTerminal<F>(pub usize, pub F);

impl<F: Fn(&[f64]) -> DVector<f64> + Sync> TerminalSampler for FnTerminal<F> {
    fn dim(&self) -> usize {
        self.0
    }
    fn sample(&self, increments: &[f64]) -> DVector<f64> {
        (self.1)(increments)
    }
}

pub struct FnControl<F, G> {
    pub dim: usize,
    pub control: F,
    pub mean: G,
}

impl<F, G> ControlSampler for FnControl<F, G>
where
    F: Fn(usize, &[f64]) -> DVector<f64> + Sync,
    G: Fn(usize) -> DVector<f64> + Sync,
{
    fn dim(&self) -> usize {
        self.dim
    }
    fn control(&self, k: usize, past: &[f64]) -> DVector<f64> {
        (self.control)(k, past)
    }
    fn mean(&self, k: usize) -> DVector<f64> {
        (self.mean)(k)
    }
}

/// Expected fundamental solution `M(t)` with `dM = -M A_hat ds`, `M(0) = I`,
/// exact on each constant piece.
pub fn mean_flow(sys: &AssembledSystem, grid: &TimeGrid) -> Vec<DMatrix<f64>> {
    let d = sys.dim();
    let mut out = alloc::vec![DMatrix::<f64>::identity(d, d)];
    for k in 0..grid.steps() {
        let a_hat = sys.at(grid.t(k)).backward.a_hat();
        let step = expm::expm(&(-a_hat * grid.dt(k)));
        let next = out.last().unwrap() * step;
        out.push(next);
    }
    out
}

/// Mean of the discrete fundamental solution (the one substituted in the
/// path recursion).
pub fn discrete_mean_flow(sys: &AssembledSystem, grid: &TimeGrid) -> Result<Vec<DMatrix<f64>>> {
    let d = sys.dim();
    Ok(DualScheme::new(sys, grid)?.mean_rows(&DMatrix::identity(d, d)).0)
}

/// One sampled path of the fundamental solution.
#[derive(Debug, Clone, PartialEq)]
pub struct PhiPath {
    pub phi: Vec<DMatrix<f64>>,
    pub mean: Vec<DMatrix<f64>>,
}

pub fn sample_phi(sys: &AssembledSystem, grid: &TimeGrid, increments: &[f64]) -> Result<PhiPath> {
    let d = sys.dim();
    let plan = DualScheme::new(sys, grid)?.plan(&DMatrix::identity(d, d));
    let mut phi = alloc::vec![plan.start.clone()];
    plan.run(increments, |_, st| phi.push(st.next.clone()));
    Ok(PhiPath { phi, mean: plan.mean_knots })
}

#[derive(Debug, Clone, PartialEq)]
pub struct GramianReport {
    pub g: DMatrix<f64>,
    /// Ascending.
    pub eigenvalues: Vec<f64>,
    pub min_eigenvalue: f64,
    /// Standard error of the smallest eigenvalue (0 when exact).
    pub min_eigenvalue_se: f64,
    pub controllable: bool,
    /// 0 for exact (tree) Gramians.
    pub paths_used: usize,
    pub std_error: DMatrix<f64>,
    pub tol: f64,
}

impl GramianReport {
    /// Symmetrises `g` and decides with `lambda_min - 3 se > tol`.
    pub fn decide(g: DMatrix<f64>, std_error: DMatrix<f64>, cov: Option<&DMatrix<f64>>, paths: usize, tol: f64) -> Self {
        let g = (&g + g.transpose()) * 0.5;
        let eig = g.clone().symmetric_eigen();
        let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
        idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let eigenvalues: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
        let min_eigenvalue = eigenvalues.first().cloned().unwrap_or(0.0);
        let min_eigenvalue_se = match (cov, idx.first()) {
            (Some(cov), Some(&i)) => {
                let v = eig.eigenvectors.column(i);
                let n = v.len();
                let vv = DVector::from_fn(n * n, |k, _| v[k % n] * v[k / n]);
                libm::sqrt((vv.transpose() * cov * &vv)[(0, 0)].max(0.0) / paths as f64)
            }
            _ => 0.0,
        };
        let controllable = min_eigenvalue - SIGMA_RULE * min_eigenvalue_se > tol;
        Self {
            g,
            eigenvalues,
            min_eigenvalue,
            min_eigenvalue_se,
            controllable,
            paths_used: paths,
            std_error,
            tol,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.g.iter().all(|x| *x == 0.0)
    }
}

struct GramAcc {
    s1: DMatrix<f64>,
    s2: DMatrix<f64>,
}

/// Monte Carlo Gramian with left-endpoint quadrature.
pub fn estimate_gramian(sys: &AssembledSystem, grid: &TimeGrid, cfg: &McConfig, tol: f64) -> Result<GramianReport> {
    check_paths(cfg.paths)?;
    let (n, d) = (sys.n, sys.dim());
    let plan = DualScheme::new(sys, grid)?.plan(&DMatrix::identity(n, d).clone_owned());
    let plan = &plan;
    let acc = sum_over_paths(
        cfg.paths,
        || GramAcc { s1: DMatrix::zeros(n, n), s2: DMatrix::zeros(n * n, n * n) },
        |acc, p| {
            let inc = path_increments(grid, cfg.seed, p, cfg.noise);
            let mut gp = DMatrix::<f64>::zeros(n, n);
            plan.run(&inc, |k, st| gp += &st.obs * st.obs.transpose() * plan.dt(k));
            let v = DVector::from_column_slice(gp.as_slice());
            acc.s2 += &v * v.transpose();
            acc.s1 += gp;
        },
        |t, o| {
            t.s1 += o.s1;
            t.s2 += o.s2;
        },
    );
    let p = cfg.paths as f64;
    let g = acc.s1 / p;
    let vg = DVector::from_column_slice(g.as_slice());
    let cov = (acc.s2 / p - &vg * vg.transpose()) * (p / (p - 1.0));
    let se = DMatrix::from_fn(n, n, |i, j| {
        let k = i + j * n;
        libm::sqrt(cov[(k, k)].max(0.0) / p)
    });
    Ok(GramianReport::decide(g, se, Some(&cov), cfg.paths, tol))
}

/// Dual process along one path.
#[derive(Debug, Clone, PartialEq)]
pub struct DualTrajectory {
    /// `xi = (eta, xi_agents)` at every knot.
    pub xi: Vec<DVector<f64>>,
    /// Mean of `xi` at every knot.
    pub mean: Vec<DVector<f64>>,
    /// Observer output on every step.
    pub observation: Vec<DVector<f64>>,
    /// Terminal functional.
    pub terminal: DVector<f64>,
}

/// Row `(eta0^T, 0)` of length `d`.
pub(crate) fn eta_rows(eta0: &DVector<f64>, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_fn(1, d, |_, c| if c < n { eta0[c] } else { 0.0 })
}

pub(crate) fn terminal_rows(sys: &AssembledSystem, rows: &DMatrix<f64>, mean: &DMatrix<f64>) -> DMatrix<f64> {
    let (n, d) = (sys.n, sys.dim());
    let (h, h_bar) = sys.terminal_weights();
    let rest = d - n;
    rows.columns(0, n) + rows.columns(n, rest) * h + mean.columns(n, rest) * h_bar
}

pub fn simulate_dual(sys: &AssembledSystem, grid: &TimeGrid, eta0: &DVector<f64>, increments: &[f64]) -> Result<DualTrajectory> {
    let (n, d) = (sys.n, sys.dim());
    let start = eta_rows(eta0, n, d);
    let plan = DualScheme::new(sys, grid)?.plan(&start);
    let mut xi: Vec<DMatrix<f64>> = alloc::vec![start.transpose()];
    let mut observation = Vec::new();
    let last = plan.run(increments, |_, st| {
        xi.push(st.next.transpose());
        observation.push(-st.obs.transpose());
    });
    let terminal = terminal_rows(sys, &last, plan.mean_knots.last().unwrap()).transpose();
    let col = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
    Ok(DualTrajectory {
        xi: xi.iter().map(col).collect(),
        mean: plan.mean_knots.iter().map(|m| col(&m.transpose())).collect(),
        observation: observation.iter().map(col).collect(),
        terminal: col(&terminal),
    })
}

fn check_sampler(name: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(Error::SamplerMismatch(format!("{name} has dimension {got}, expected {want}")))
    }
}

/// `L x_T` by duality: component `i` is `E<L* e_i, x_T>`, all components
/// from the same paths.
#[allow(non_snake_case)]
pub fn apply_L(sys: &AssembledSystem, grid: &TimeGrid, x_t: &dyn TerminalSampler, cfg: &McConfig) -> Result<VecEstimate> {
    check_paths(cfg.paths)?;
    check_sampler("terminal sampler", x_t.dim(), sys.n)?;
    let (n, d) = (sys.n, sys.dim());
    let plan = DualScheme::new(sys, grid)?.plan(&DMatrix::identity(n, d));
    let plan = &plan;
    let mean_t = plan.mean_knots.last().unwrap();
    let acc = sum_over_paths(
        cfg.paths,
        || Moments::zeros(n),
        |acc, p| {
            let inc = path_increments(grid, cfg.seed, p, cfg.noise);
            let rows = plan.run(&inc, |_, _| {});
            let lstar = terminal_rows(sys, &rows, mean_t);
            let v = lstar * x_t.sample(&inc);
            acc.add(v.as_slice());
        },
        Moments::merge,
    );
    Ok(acc.finish())
}

/// Per-path `<L* eta0, x_T> - sum dt <o, v>`, whose mean is `<eta0, x(0)>`
/// for the backward solution driven by `(x_T, v)`.
pub fn duality_rhs(
    sys: &AssembledSystem,
    grid: &TimeGrid,
    eta0: &DVector<f64>,
    x_t: &dyn TerminalSampler,
    v: &dyn ControlSampler,
    cfg: &McConfig,
) -> Result<Estimate> {
    check_paths(cfg.paths)?;
    check_sampler("terminal sampler", x_t.dim(), sys.n)?;
    check_sampler("control sampler", v.dim(), sys.m0)?;
    let (n, d) = (sys.n, sys.dim());
    let start = eta_rows(eta0, n, d);
    let plan = DualScheme::new(sys, grid)?.plan(&start);
    let plan = &plan;
    let mean_t = plan.mean_knots.last().unwrap();
    let acc = sum_over_paths(
        cfg.paths,
        || Moments::zeros(1),
        |acc, p| {
            let inc = path_increments(grid, cfg.seed, p, cfg.noise);
            let mut s = 0.0;
            let rows = plan.run(&inc, |k, st| {
                s -= plan.dt(k) * (&st.obs * v.control(k, &inc[..k]))[(0, 0)];
            });
            s += (terminal_rows(sys, &rows, mean_t) * x_t.sample(&inc))[(0, 0)];
            acc.add(&[s]);
        },
        Moments::merge,
    );
    let e = acc.finish();
    Ok(Estimate { mean: e.mean[0], std_error: e.std_error[0] })
}

/// Energy `E sum dt |K* eta0|^2` of the observer output.
pub fn observation_energy(sys: &AssembledSystem, grid: &TimeGrid, eta0: &DVector<f64>, cfg: &McConfig) -> Result<Estimate> {
    check_paths(cfg.paths)?;
    let (n, d) = (sys.n, sys.dim());
    let start = eta_rows(eta0, n, d);
    let plan = DualScheme::new(sys, grid)?.plan(&start);
    let plan = &plan;
    let acc = sum_over_paths(
        cfg.paths,
        || Moments::zeros(1),
        |acc, p| {
            let inc = path_increments(grid, cfg.seed, p, cfg.noise);
            let mut s = 0.0;
            plan.run(&inc, |k, st| s += plan.dt(k) * st.obs.norm_squared());
            acc.add(&[s]);
        },
        Moments::merge,
    );
    let e = acc.finish();
    Ok(Estimate { mean: e.mean[0], std_error: e.std_error[0] })
}

/// Steering control `v*` evaluated along a path from the dual started at
/// `eta0`.
pub struct DualControl<'a> {
    plan: crate::scheme::RowsPlan,
    m0: usize,
    _sys: &'a AssembledSystem,
}

impl<'a> DualControl<'a> {
    pub fn new(sys: &'a AssembledSystem, grid: &TimeGrid, eta0: &DVector<f64>) -> Result<Self> {
        let (n, d) = (sys.n, sys.dim());
        let start = eta_rows(eta0, n, d);
        let plan = DualScheme::new(sys, grid)?.plan(&start);
        Ok(Self { plan, m0: sys.m0, _sys: sys })
    }
}

impl ControlSampler for DualControl<'_> {
    fn dim(&self) -> usize {
        self.m0
    }
    fn control(&self, k: usize, past: &[f64]) -> DVector<f64> {
        let mut rows = self.plan.start.clone();
        for (j, &dw) in past.iter().enumerate().take(k) {
            rows = self.plan.step(j, &rows, dw).next;
        }
        let st = self.plan.step(k, &rows, 0.0);
        DVector::from_column_slice(st.obs.transpose().as_slice())
    }
    fn mean(&self, k: usize) -> DVector<f64> {
        DVector::from_column_slice(self.plan.mean_obs(k).transpose().as_slice())
    }
}

/// Forward state path with its companion mean.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub x: Vec<DVector<f64>>,
    pub mean: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub increments: Vec<f64>,
}

/// Euler-Maruyama for the controlled state; `controls` supplies the full
/// control `(u0, u_1, ..., u_N)`.
pub fn simulate_state(
    sys: &AssembledSystem,
    grid: &TimeGrid,
    x0: &DVector<f64>,
    controls: &dyn ControlSampler,
    increments: &[f64],
) -> Result<StatePath> {
    let m = sys.m0 + sys.m_agents();
    check_sampler("control sampler", controls.dim(), m)?;
    check_sampler("initial state", x0.len(), sys.n)?;
    if increments.len() != grid.steps() {
        return Err(Error::SamplerMismatch(format!("{} increments for {} steps", increments.len(), grid.steps())));
    }
    let mut x = alloc::vec![x0.clone()];
    let mut mean = alloc::vec![x0.clone()];
    let mut us = Vec::with_capacity(grid.steps());
    for k in 0..grid.steps() {
        let raw = &sys.at(grid.t(k)).raw;
        let dt = grid.dt(k);
        let u = controls.control(k, &increments[..k]);
        let ub = controls.mean(k);
        let (xk, xb) = (&x[k], &mean[k]);
        let drift = &raw.a * xk + &raw.a_bar * xb + &raw.b * &u + &raw.b_bar * &ub;
        let diff = &raw.c * xk + &raw.c_bar * xb + &raw.d * &u + &raw.d_bar * &ub;
        let next = xk + drift * dt + diff * increments[k];
        let mnext = xb + ((&raw.a + &raw.a_bar) * xb + (&raw.b + &raw.b_bar) * &ub) * dt;
        x.push(next);
        mean.push(mnext);
        us.push(u);
    }
    Ok(StatePath { x, mean, controls: us, increments: increments.to_vec() })
}

pub fn simulate_ensemble(
    sys: &AssembledSystem,
    grid: &TimeGrid,
    x0: &DVector<f64>,
    controls: &dyn ControlSampler,
    cfg: &McConfig,
) -> Result<Vec<StatePath>> {
    (0..cfg.paths)
        .map(|p| simulate_state(sys, grid, x0, controls, &path_increments(grid, cfg.seed, p, cfg.noise)))
        .collect()
}

/// Cost of agent `agent` (0-based) over an ensemble: expectation terms
/// from path averages, mean-field terms from the ensemble means.
pub fn evaluate_cost(sys: &AssembledSystem, grid: &TimeGrid, agent: usize, ensemble: &[StatePath]) -> Result<f64> {
    if agent >= sys.n_agents {
        return Err(Error::OutOfRange { index: agent + 1, max: sys.n_agents });
    }
    let k_steps = grid.steps();
    if ensemble.is_empty() || ensemble.iter().any(|p| p.x.len() != k_steps + 1 || p.controls.len() != k_steps) {
        return Err(Error::EnsembleMismatch(format!("paths must carry {} knots and {k_steps} controls", k_steps + 1)));
    }
    let p = ensemble.len() as f64;
    let raw0 = &sys.pieces[0].raw;
    let off = sys.m0 + raw0.agent_dims[..agent].iter().sum::<usize>();
    let mi = raw0.agent_dims[agent];
    let mean_at = |f: &dyn Fn(&StatePath) -> DVector<f64>| {
        let mut m = f(&ensemble[0]) * 0.0;
        for path in ensemble {
            m += f(path);
        }
        m / p
    };
    let quad = |m: &DMatrix<f64>, v: &DVector<f64>| (v.transpose() * m * v)[(0, 0)];
    let (h, h_bar) = (&raw0.h[agent], &raw0.h_bar[agent]);
    let mut j = ensemble.iter().map(|s| quad(h, &s.x[k_steps])).sum::<f64>() / p;
    j += quad(h_bar, &mean_at(&|s| s.x[k_steps].clone()));
    for k in 0..k_steps {
        let raw = &sys.at(grid.t(k)).raw;
        let dt = grid.dt(k);
        let ui = |s: &StatePath| s.controls[k].rows(off, mi).clone_owned();
        let e: f64 = ensemble.iter().map(|s| quad(&raw.q[agent], &s.x[k]) + quad(&raw.r[agent], &ui(s))).sum::<f64>() / p;
        let xm = mean_at(&|s| s.x[k].clone());
        let um = mean_at(&|s| ui(s));
        j += dt * (e + quad(&raw.q_bar[agent], &xm) + quad(&raw.r_bar[agent], &um));
    }
    Ok(j)
}
