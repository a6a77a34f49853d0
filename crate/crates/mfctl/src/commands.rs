//! Subcommands. Each one writes `<command>.json` (plus CSV tables where
//! there are processes) into the output directory and returns a one-line
//! verdict and an exit status.

use std::path::PathBuf;

use clap::ValueEnum;
use mfctl_core::assembly::{assemble, AssembledSystem};
use mfctl_core::blocktensor::DEFAULT_TOL_REL;
use mfctl_core::error::{Assumption, Error};
use mfctl_core::grid::TimeGrid;
use mfctl_core::kalman::controllable_subspace;
use mfctl_core::model::{check_assumptions, require, GameSpec, DEFAULT_DELTA, SYMMETRY_TOL};
use mfctl_core::sde::{self, path_increments, ControlSampler, GramianReport, McConfig, Noise, DEFAULT_GRAM_TOL};
use mfctl_core::synthesis::{mc_steering_control, run_pipeline, PipelineParams, SteeringPlan};
use mfctl_core::tree::{join_controls, tree_gramian, TreeSpace};
use serde_json::{json, Value};

use crate::config::{read_problem, ConfigError, Problem};
use crate::report;

/// Sample paths written to CSV by the Monte Carlo backend.
const EXPORTED_PATHS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    Tree,
    Mc,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Validate,
    Assemble,
    Kalman,
    Gram,
    Observe,
    Steer,
    Pipeline,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Validate => "validate",
            Command::Assemble => "assemble",
            Command::Kalman => "kalman",
            Command::Gram => "gram",
            Command::Observe => "observe",
            Command::Steer => "steer",
            Command::Pipeline => "pipeline",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub problem: PathBuf,
    pub steps: usize,
    pub paths: usize,
    pub depth: usize,
    pub seed: u64,
    /// Decision tolerance of the command; `None` keeps the default.
    pub tol: Option<f64>,
    pub out: PathBuf,
    pub backend: BackendKind,
}

impl RunConfig {
    pub fn new(problem: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self { problem: problem.into(), steps: 8, paths: 10_000, depth: 8, seed: 0, tol: None, out: out.into(), backend: BackendKind::Tree }
    }

    fn kalman_tol(&self, cmd: Command) -> f64 {
        match (cmd, self.tol) {
            (Command::Kalman, Some(t)) => t,
            _ => DEFAULT_TOL_REL,
        }
    }

    fn gram_tol(&self, cmd: Command) -> f64 {
        match (cmd, self.tol) {
            (Command::Kalman, _) | (_, None) => DEFAULT_GRAM_TOL,
            (_, Some(t)) => t,
        }
    }

    fn mc(&self) -> McConfig {
        McConfig { paths: self.paths, seed: self.seed, noise: Noise::Gaussian }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    /// Machine-readable line for stdout.
    pub verdict: String,
    /// Human-readable detail for stderr on failure.
    pub message: Option<String>,
    pub files: Vec<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Config(ConfigError),
    Core(Error),
    Io(String),
    Usage(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Core(Error::AssumptionViolated { .. }) => 2,
            Failure::Core(Error::NotExactlyControllable { .. }) => 3,
            _ => 1,
        }
    }

    fn verdict(&self) -> String {
        match self {
            Failure::Core(Error::AssumptionViolated { assumption, .. }) => format!("error=assumption assumption={assumption}"),
            Failure::Core(Error::NotExactlyControllable { min_eigenvalue, tol }) => {
                let g = if *min_eigenvalue == 0.0 { " G=0" } else { "" };
                format!("error=not-exactly-controllable{g} min_eigenvalue={min_eigenvalue:e} tol={tol:e}")
            }
            Failure::Core(Error::BudgetExceeded { required, budget }) => format!("error=budget required={required} budget={budget}"),
            Failure::Core(_) => "error=numeric".into(),
            Failure::Config(_) => "error=config".into(),
            Failure::Io(_) => "error=io".into(),
            Failure::Usage(_) => "error=usage".into(),
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Config(e) => e.to_string(),
            Failure::Core(e) => e.to_string(),
            Failure::Io(s) | Failure::Usage(s) => s.clone(),
        }
    }
}

struct Success {
    body: Value,
    verdict: String,
    code: i32,
}

struct Ctx<'a> {
    cmd: Command,
    cfg: &'a RunConfig,
    problem: Problem,
    files: Vec<PathBuf>,
}

impl Ctx<'_> {
    fn spec(&self) -> &GameSpec {
        &self.problem.spec
    }

    fn file(&mut self, name: &str) -> PathBuf {
        let p = self.cfg.out.join(name);
        self.files.push(p.clone());
        p
    }

    fn system(&self) -> Result<AssembledSystem, Failure> {
        let report = check_assumptions(self.spec(), DEFAULT_DELTA);
        require(&report, &[Assumption::H2, Assumption::H4])?;
        Ok(assemble(self.spec())?)
    }

    fn header(&self) -> Value {
        let c = self.cfg;
        json!({
            "tool": "mfctl",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.cmd.name(),
            "problem": c.problem.display().to_string(),
            "backend": match c.backend { BackendKind::Tree => "tree", BackendKind::Mc => "mc" },
            "depth": c.depth,
            "steps": c.steps,
            "paths": c.paths,
            "seed": c.seed,
            "tolerances": {
                "gram_tol": c.gram_tol(self.cmd),
                "kalman_tol_rel": c.kalman_tol(self.cmd),
                "delta": DEFAULT_DELTA,
                "symmetry": SYMMETRY_TOL,
            },
        })
    }

    fn gramian(&self, sys: &AssembledSystem) -> Result<GramianReport, Failure> {
        let tol = self.cfg.gram_tol(self.cmd);
        Ok(match self.cfg.backend {
            BackendKind::Tree => tree_gramian(sys, &TreeSpace::uniform(sys, self.cfg.depth)?, tol)?,
            BackendKind::Mc => sde::estimate_gramian(sys, &TimeGrid::for_system(sys, self.cfg.steps)?, &self.cfg.mc(), tol)?,
        })
    }

    fn params(&self, nash: bool) -> PipelineParams {
        let mut p = match self.cfg.backend {
            BackendKind::Tree => PipelineParams::tree(self.cfg.depth),
            BackendKind::Mc => PipelineParams::monte_carlo(self.cfg.steps, self.cfg.mc()),
        };
        p.gram_tol = self.cfg.gram_tol(self.cmd);
        if let Some(probe) = p.nash.as_mut() {
            probe.seed = self.cfg.seed;
        }
        if !nash {
            p.nash = None;
        }
        p
    }

    fn plan(&self, nash: bool) -> Result<SteeringPlan, Failure> {
        let target = self.problem.target.as_ref().ok_or_else(|| Failure::Usage("problem file has no [target] section".into()))?;
        Ok(run_pipeline(self.spec(), &target.x0, &target.x_t, &self.params(nash))?)
    }
}

fn validate(ctx: &mut Ctx) -> Result<Success, Failure> {
    let r = check_assumptions(ctx.spec(), DEFAULT_DELTA);
    let valid = r.h2.holds && r.h4.holds && (r.h1.holds || r.h3_user_asserted);
    let verdict = format!(
        "valid={valid} H1={} H2={} H3_asserted={} H4={} H5={} H6={} delta={:e}",
        r.h1.holds, r.h2.holds, r.h3_user_asserted, r.h4.holds, r.h5.holds, r.h6.holds, r.delta
    );
    let body = json!({ "valid": valid, "assumptions": report::assumptions(&r) });
    Ok(Success { body, verdict, code: if valid { 0 } else { 2 } })
}

fn assemble_cmd(ctx: &mut Ctx) -> Result<Success, Failure> {
    let sys = ctx.system()?;
    let pieces: Vec<Value> = sys
        .starts
        .iter()
        .zip(&sys.pieces)
        .map(|(t, p)| {
            let b = &p.backward;
            json!({
                "from": t,
                "A": report::matrix(&b.a),
                "A_bar": report::matrix(&b.a_bar),
                "C": report::matrix(&b.c),
                "C_bar": report::matrix(&b.c_bar),
                "B": report::matrix(&b.b),
                "B_bar": report::matrix(&b.b_bar),
                "D0_right_inverse": report::matrix(&b.d0_pinv),
                "D0_kernel_projector": report::matrix(&b.d0_kernel),
            })
        })
        .collect();
    let verdict = format!("assembled pieces={} dim={} time_invariant={}", sys.pieces.len(), sys.dim(), sys.is_time_invariant());
    Ok(Success { body: json!({ "dim": sys.dim(), "n": sys.n, "m0": sys.m0, "agents": sys.n_agents, "pieces": pieces }), verdict, code: 0 })
}

fn kalman_cmd(ctx: &mut Ctx) -> Result<Success, Failure> {
    let sys = ctx.system()?;
    let r = controllable_subspace(&sys, ctx.cfg.kalman_tol(ctx.cmd), false)?;
    let verdict = format!("rank={} controllable={} tol_rel={:e}", r.rank, r.controllable, r.tol_rel);
    Ok(Success { body: json!({ "kalman": report::kalman(&r) }), verdict, code: if r.controllable { 0 } else { 3 } })
}

fn gram_cmd(ctx: &mut Ctx) -> Result<Success, Failure> {
    let sys = ctx.system()?;
    let g = ctx.gramian(&sys)?;
    let verdict = if g.is_zero() {
        format!("G=0 controllable=false tol={:e}", g.tol)
    } else {
        format!("lambda_min={:e} se={:e} controllable={} tol={:e}", g.min_eigenvalue, g.min_eigenvalue_se, g.controllable, g.tol)
    };
    Ok(Success { body: json!({ "gramian": report::gramian(&g) }), verdict, code: if g.controllable { 0 } else { 3 } })
}

fn observe_cmd(ctx: &mut Ctx) -> Result<Success, Failure> {
    let sys = ctx.system()?;
    let g = ctx.gramian(&sys)?;
    // observability inequality constant
    let delta = g.min_eigenvalue.max(0.0);
    let verdict = format!("observable={} delta={:e} se={:e} tol={:e}", g.controllable, delta, g.min_eigenvalue_se, g.tol);
    let body = json!({ "observable": g.controllable, "inequality_constant": delta, "gramian": report::gramian(&g) });
    Ok(Success { body, verdict, code: if g.controllable { 0 } else { 3 } })
}

fn plan_body(plan: &SteeringPlan) -> Value {
    let v = &plan.verification;
    json!({
        "backend": plan.backend,
        "gramian": report::gramian(&plan.gramian),
        "kalman": plan.kalman.as_ref().map(report::kalman),
        "x0": report::vector(&plan.x0),
        "L_xT": report::vector(&plan.lx_t),
        "L_xT_se": plan.lx_t_se.as_ref().map(report::vector),
        "eta0": report::vector(&plan.eta0),
        "g_min": plan.g_min,
        "verification": {
            "initial_residual": v.initial_residual,
            "initial_residual_se": v.initial_residual_se,
            "terminal_residual": v.terminal_residual,
            "resimulation_residual": v.resimulation_residual,
            "qv_mean_residual": v.qv_mean_residual,
            "qv_centered_residual": v.qv_centered_residual,
            "hamiltonian_residual": v.hamiltonian_residual,
            "steering_form_gap": v.steering_form_gap,
            "backward_residual": v.backward_residual,
            "nash": v.nash.as_ref().map(|f| json!({
                "c0": f.c0, "c1": f.c1, "c2": f.c2, "fit_residual": f.residual,
                "values": f.values.iter().map(|(e, j)| json!([e, j])).collect::<Vec<_>>(),
            })),
        },
    })
}

/// Writes the steering control: per node on the tree, along the first
/// few sample paths for Monte Carlo.
fn write_control(ctx: &mut Ctx, plan: &SteeringPlan) -> Result<(), Failure> {
    let sys = assemble(ctx.spec())?;
    let path = ctx.file("steer_v.csv");
    match (&plan.v, ctx.cfg.backend) {
        (Some(v), BackendKind::Tree) => {
            let space = TreeSpace::uniform(&sys, ctx.cfg.depth)?;
            report::write_tree_control_csv(&path, &space, "v", v)?;
        }
        _ => {
            let grid = TimeGrid::for_system(&sys, ctx.cfg.steps)?;
            let ctl = mc_steering_control(&sys, &grid, &plan.eta0)?;
            let mut rows = Vec::new();
            for p in 0..ctx.cfg.paths.min(EXPORTED_PATHS) {
                let inc = path_increments(&grid, ctx.cfg.seed, p, Noise::Gaussian);
                for k in 0..grid.steps() {
                    rows.push((p, grid.t(k), ctl.control(k, &inc[..k])));
                }
            }
            report::write_paths_csv(&path, ctx.cfg.seed, "v", sys.m0, &rows)?;
        }
    }
    Ok(())
}

fn steer_cmd(ctx: &mut Ctx) -> Result<Success, Failure> {
    let plan = ctx.plan(false)?;
    write_control(ctx, &plan)?;
    let v = &plan.verification;
    let verdict = format!(
        "steered initial_residual={:e} se={:e} g_min={:e} tol={:e}",
        v.initial_residual, v.initial_residual_se, plan.g_min, plan.gramian.tol
    );
    Ok(Success { body: plan_body(&plan), verdict, code: 0 })
}

fn pipeline_cmd(ctx: &mut Ctx) -> Result<Success, Failure> {
    let plan = ctx.plan(true)?;
    write_control(ctx, &plan)?;
    if let (Some(bundle), Some(u0), Some(un)) = (&plan.bundle, &plan.u0, &plan.u_nash) {
        let path = ctx.file("bundle.csv");
        report::write_bundle_csv(&path, bundle, &join_controls(u0, un))?;
    }
    let v = &plan.verification;
    let opt = |x: Option<f64>| x.map_or("na".to_string(), |x| format!("{x:e}"));
    let verdict = format!(
        "pipeline initial_residual={:e} se={:e} resimulation_residual={} hamiltonian_residual={} nash_c1={} nash_c2={} tol={:e}",
        v.initial_residual,
        v.initial_residual_se,
        opt(v.resimulation_residual),
        opt(v.hamiltonian_residual),
        opt(v.nash.as_ref().map(|f| f.c1)),
        opt(v.nash.as_ref().map(|f| f.c2)),
        plan.gramian.tol
    );
    let mut body = plan_body(&plan);
    body["assumptions"] = report::assumptions(&plan.assumptions);
    Ok(Success { body, verdict, code: 0 })
}

/// Runs one subcommand end to end.
pub fn run(cmd: Command, cfg: &RunConfig) -> Outcome {
    let problem = match read_problem(&cfg.problem) {
        Ok(p) => p,
        Err(e) => {
            let f = Failure::Config(e);
            return Outcome { code: f.code(), verdict: f.verdict(), message: Some(f.message()), files: vec![] };
        }
    };
    if let Err(e) = std::fs::create_dir_all(&cfg.out) {
        let f = Failure::Io(format!("cannot create {}: {e}", cfg.out.display()));
        return Outcome { code: f.code(), verdict: f.verdict(), message: Some(f.message()), files: vec![] };
    }
    let mut ctx = Ctx { cmd, cfg, problem, files: Vec::new() };
    let result = match cmd {
        Command::Validate => validate(&mut ctx),
        Command::Assemble => assemble_cmd(&mut ctx),
        Command::Kalman => kalman_cmd(&mut ctx),
        Command::Gram => gram_cmd(&mut ctx),
        Command::Observe => observe_cmd(&mut ctx),
        Command::Steer => steer_cmd(&mut ctx),
        Command::Pipeline => pipeline_cmd(&mut ctx),
    };
    let header = ctx.header();
    let (mut doc, verdict, code, message) = match result {
        Ok(s) => (s.body, s.verdict, s.code, None),
        Err(f) => (json!({ "error": f.message() }), f.verdict(), f.code(), Some(f.message())),
    };
    doc["header"] = header;
    doc["verdict"] = json!(verdict);
    doc["exit_code"] = json!(code);
    let report_path = ctx.file(&format!("{}.json", cmd.name()));
    if let Err(e) = report::write_json(&report_path, &doc) {
        let f = Failure::Io(e.to_string());
        return Outcome { code: f.code(), verdict: f.verdict(), message: Some(f.message()), files: ctx.files };
    }
    Outcome { code, verdict, message, files: ctx.files }
}
