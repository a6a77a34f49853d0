//! Discrete fundamental-solution/dual recursion shared by the Monte Carlo
//! engine and the tree.
//!
//! Rows `R` of the fundamental solution (or the transposed dual state) are
//! advanced with the drift taken implicitly,
//!
//! ```text
//! R~ (I + dt A) + dt M~ A_bar = R,     M~ (I + dt A_hat) = M,
//! R' = R~ - dW (R~ C + M~ C_bar),      M' = M~,
//! ```
//!
//! and the observation on the step is `R~ B + M~ B_bar`. This is the exact
//! adjoint of the implicit backward sweep, so discrete duality holds to
//! rounding.

use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::assembly::AssembledSystem;
use crate::error::{Error, Result};
use crate::field::inverse;
use crate::grid::TimeGrid;

#[derive(Debug, Clone)]
struct Step {
    dt: f64,
    sqrt_dt: f64,
    piece: usize,
    inv: DMatrix<f64>,
    inv_hat: DMatrix<f64>,
}

/// Per-step implicit inverses on a grid.
#[derive(Debug, Clone)]
pub struct DualScheme<'a> {
    pub sys: &'a AssembledSystem,
    steps: Vec<Step>,
}

impl<'a> DualScheme<'a> {
    pub fn new(sys: &'a AssembledSystem, grid: &TimeGrid) -> Result<Self> {
        let d = sys.dim();
        let id = DMatrix::<f64>::identity(d, d);
        let mut steps = Vec::with_capacity(grid.steps());
        for k in 0..grid.steps() {
            let t = grid.t(k);
            let piece = sys.starts.iter().rposition(|&s| s <= t).unwrap_or(0);
            let bw = &sys.pieces[piece].backward;
            let dt = grid.dt(k);
            let inv = inverse(&(&id + &bw.a * dt)).ok_or(Error::StepTooCoarse { level: k })?;
            let inv_hat = inverse(&(&id + bw.a_hat() * dt)).ok_or(Error::StepTooCoarse { level: k })?;
            steps.push(Step { dt, sqrt_dt: libm::sqrt(dt), piece, inv, inv_hat });
        }
        Ok(Self { sys, steps })
    }

    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.steps[k].dt
    }

    pub fn sqrt_dt(&self, k: usize) -> f64 {
        self.steps[k].sqrt_dt
    }

    pub fn piece(&self, k: usize) -> usize {
        self.steps[k].piece
    }

    /// `(I + dt A)^{-1}` and `(I + dt A_hat)^{-1}` of step `k`.
    pub fn inverses(&self, k: usize) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.steps[k].inv, &self.steps[k].inv_hat)
    }

    /// Mean rows at every knot and their implicit versions on every step.
    pub fn mean_rows(&self, start: &DMatrix<f64>) -> (Vec<DMatrix<f64>>, Vec<DMatrix<f64>>) {
        let mut knots = alloc::vec![start.clone()];
        let mut tilde = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let mt = knots.last().unwrap() * &s.inv_hat;
            knots.push(mt.clone());
            tilde.push(mt);
        }
        (knots, tilde)
    }

    /// Plan for propagating rows that start from `start`.
    pub fn plan(&self, start: &DMatrix<f64>) -> RowsPlan {
        let (knots, tilde) = self.mean_rows(start);
        let steps = self
            .steps
            .iter()
            .zip(&tilde)
            .map(|(s, mt)| {
                let bw = &self.sys.pieces[s.piece].backward;
                PlanStep {
                    dt: s.dt,
                    sqrt_dt: s.sqrt_dt,
                    inv: s.inv.clone(),
                    c: bw.c.clone(),
                    b: bw.b.clone(),
                    shift: mt * &bw.a_bar * s.dt,
                    mean_c: mt * &bw.c_bar,
                    mean_b: mt * &bw.b_bar,
                    mean_obs: mt * bw.b_hat(),
                }
            })
            .collect();
        RowsPlan { start: start.clone(), steps, mean_knots: knots, mean_tilde: tilde }
    }
}

#[derive(Debug, Clone)]
struct PlanStep {
    dt: f64,
    sqrt_dt: f64,
    inv: DMatrix<f64>,
    c: DMatrix<f64>,
    b: DMatrix<f64>,
    shift: DMatrix<f64>,
    mean_c: DMatrix<f64>,
    mean_b: DMatrix<f64>,
    mean_obs: DMatrix<f64>,
}

/// One rows recursion with its deterministic mean part precomputed.
#[derive(Debug, Clone)]
pub struct RowsPlan {
    pub start: DMatrix<f64>,
    steps: Vec<PlanStep>,
    pub mean_knots: Vec<DMatrix<f64>>,
    pub mean_tilde: Vec<DMatrix<f64>>,
}

/// Output of a single step.
pub struct RowsStep {
    pub tilde: DMatrix<f64>,
    pub obs: DMatrix<f64>,
    pub next: DMatrix<f64>,
}

impl RowsPlan {
    pub fn steps(&self) -> usize {
        self.steps.len()
    }

    pub fn dt(&self, k: usize) -> f64 {
        self.steps[k].dt
    }

    pub fn sqrt_dt(&self, k: usize) -> f64 {
        self.steps[k].sqrt_dt
    }

    /// Mean observation on step `k`.
    pub fn mean_obs(&self, k: usize) -> &DMatrix<f64> {
        &self.steps[k].mean_obs
    }

    pub fn step(&self, k: usize, rows: &DMatrix<f64>, dw: f64) -> RowsStep {
        let s = &self.steps[k];
        let tilde = (rows - &s.shift) * &s.inv;
        let obs = &tilde * &s.b + &s.mean_b;
        let next = &tilde - (&tilde * &s.c + &s.mean_c) * dw;
        RowsStep { tilde, obs, next }
    }

    /// Runs the recursion along one increment path, calling `visit` on
    /// every step; returns the terminal rows.
    pub fn run(&self, increments: &[f64], mut visit: impl FnMut(usize, &RowsStep)) -> DMatrix<f64> {
        let mut rows = self.start.clone();
        for (k, &dw) in increments.iter().enumerate().take(self.steps.len()) {
            let st = self.step(k, &rows, dw);
            visit(k, &st);
            rows = st.next;
        }
        rows
    }
}
