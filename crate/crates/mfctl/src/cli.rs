//! Argument parsing.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{BackendKind, Command, RunConfig};

/// Output directory when neither `--out` nor the environment sets one.
pub const DEFAULT_OUT: &str = "mfctl-out";
pub const OUT_ENV: &str = "MFCTL_OUT";

#[derive(Debug, Parser)]
#[command(name = "mfctl", version, about = "Controllability and steering of mean-field regulator games")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Check the problem file and the standing assumptions
    Validate(RunArgs),
    /// Build the backward-system coefficients
    Assemble(RunArgs),
    /// Rank test on the generated subspace (time-invariant problems)
    Kalman(RunArgs),
    /// Controllability Gramian and its verdict
    Gram(RunArgs),
    /// Observability verdict and inequality constant of the dual system
    Observe(RunArgs),
    /// Minimal-energy steering control to the target
    Steer(RunArgs),
    /// Steering, regulator control and agents' equilibrium with checks
    Pipeline(RunArgs),
}

#[derive(Debug, Clone, Args)]
pub struct RunArgs {
    /// Problem file (TOML)
    pub problem: PathBuf,
    /// Time steps of the Monte Carlo grid
    #[arg(long, default_value_t = 8)]
    pub steps: usize,
    /// Monte Carlo paths
    #[arg(long, default_value_t = 10_000)]
    pub paths: usize,
    /// Tree depth
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// Root seed
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Decision tolerance (relative rank tolerance for `kalman`, Gramian threshold otherwise)
    #[arg(long)]
    pub tol: Option<f64>,
    /// Output directory
    #[arg(long, env = OUT_ENV, default_value = DEFAULT_OUT)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = BackendKind::Tree)]
    pub backend: BackendKind,
}

impl Sub {
    pub fn split(self) -> (Command, RunConfig) {
        let (cmd, a) = match self {
            Sub::Validate(a) => (Command::Validate, a),
            Sub::Assemble(a) => (Command::Assemble, a),
            Sub::Kalman(a) => (Command::Kalman, a),
            Sub::Gram(a) => (Command::Gram, a),
            Sub::Observe(a) => (Command::Observe, a),
            Sub::Steer(a) => (Command::Steer, a),
            Sub::Pipeline(a) => (Command::Pipeline, a),
        };
        let cfg = RunConfig { problem: a.problem, steps: a.steps, paths: a.paths, depth: a.depth, seed: a.seed, tol: a.tol, out: a.out, backend: a.backend };
        (cmd, cfg)
    }
}
