//! Ready-made problems.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::model::{AgentCost, Dynamics, GameSpec, Piecewise};

fn c(m: DMatrix<f64>) -> Piecewise {
    Piecewise::constant(m)
}

fn rows(r: usize, cols: usize, v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_row_slice(r, cols, v)
}

/// Two agents steering a planar state; the regulator has three controls.
/// Terminal weights are `H = I`, `H_bar = 0` for both agents.
pub fn two_agent_plane() -> GameSpec {
    let n = 2;
    // columns: regulator (3), agent 1 (1), agent 2 (1)
    let b = rows(2, 5, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
    let b_bar = rows(2, 5, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
    let d = rows(2, 5, &[1.0, 1.0, 0.0, 2.0, 0.0, 1.0, 1.0, 1.0, 0.0, 2.0]);
    let d_bar = rows(2, 5, &[0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    let dynamics = Dynamics {
        a: c(-DMatrix::identity(n, n)),
        a_bar: c(DMatrix::zeros(n, n)),
        b: c(b),
        b_bar: c(b_bar),
        c: c(DMatrix::identity(n, n)),
        c_bar: c(DMatrix::zeros(n, n)),
        d: c(d),
        d_bar: c(d_bar),
    };
    let agent = |q: [f64; 2], qb: [f64; 2], r: f64| AgentCost {
        h: DMatrix::identity(n, n),
        h_bar: DMatrix::zeros(n, n),
        q: c(DMatrix::from_diagonal(&DVector::from_row_slice(&q))),
        q_bar: c(DMatrix::from_diagonal(&DVector::from_row_slice(&qb))),
        r: c(rows(1, 1, &[r])),
        r_bar: c(rows(1, 1, &[r])),
    };
    GameSpec {
        n,
        m0: 3,
        agent_dims: vec![1, 1],
        horizon: 1.0,
        dynamics,
        agents: vec![agent([1.0, 0.0], [0.0, 1.0], 1.0), agent([0.0, 2.0], [2.0, 0.0], 2.0)],
        h3_asserted: false,
    }
}

/// Regulator with `m0 = n = 2` and `D0 = I`: the backward control matrix
/// vanishes and nothing can be steered.
pub fn square_regulator() -> GameSpec {
    let mut spec = two_agent_plane();
    spec.m0 = 2;
    let b = rows(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    let b_bar = rows(2, 4, &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
    let d = rows(2, 4, &[1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 2.0]);
    let d_bar = rows(2, 4, &[0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 2.0, 0.0]);
    spec.dynamics.b = c(b);
    spec.dynamics.b_bar = c(b_bar);
    spec.dynamics.d = c(d);
    spec.dynamics.d_bar = c(d_bar);
    spec
}

/// Wealth of a principal who injects money while two managers invest in
/// a stock; managers dislike terminal wealth, its variance and fees.
/// The principal does not act on the noise, so the diffusion condition
/// on the regulator fails.
pub fn principal_agent() -> GameSpec {
    let (r, mu, sigma) = (0.05, 0.1, 0.2);
    let one = |v: f64| rows(1, 1, &[v]);
    let dynamics = Dynamics {
        a: c(one(r)),
        a_bar: c(one(0.0)),
        b: c(rows(1, 3, &[1.0, mu - r, mu - r])),
        b_bar: c(rows(1, 3, &[0.0; 3])),
        c: c(one(0.0)),
        c_bar: c(one(0.0)),
        d: c(rows(1, 3, &[0.0, sigma, sigma])),
        d_bar: c(rows(1, 3, &[0.0; 3])),
    };
    // terminal a x^2 + a_var Var x, running b x^2 + b_var Var x, fee g pi^2
    let agent = |a: f64, a_var: f64, b: f64, b_var: f64, g: f64| AgentCost {
        h: one(a + a_var),
        h_bar: one(-a_var),
        q: c(one(b + b_var)),
        q_bar: c(one(-b_var)),
        r: c(one(g)),
        r_bar: c(one(0.0)),
    };
    GameSpec {
        n: 1,
        m0: 1,
        agent_dims: vec![1, 1],
        horizon: 1.0,
        dynamics,
        agents: vec![agent(1.0, 0.5, 0.1, 0.2, 1.0), agent(0.5, -0.2, 0.1, 0.1, 2.0)],
        h3_asserted: false,
    }
}

/// Shape of a randomly drawn problem.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomGame {
    pub n: usize,
    pub m0: usize,
    pub agent_dims: Vec<usize>,
    pub mean_field: bool,
    pub horizon: f64,
}

/// Time-invariant problem with entries on a quarter grid (exact in
/// binary), PSD weights and `R = I + L L^T`; the regulator diffusion has
/// full row rank with margin.
pub fn random_game(shape: &RandomGame, seed: u64) -> GameSpec {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut draw = |r: usize, cols: usize| DMatrix::from_fn(r, cols, |_, _| (rng.random_range(-4i32..=4) as f64) / 4.0);
    let (n, m0) = (shape.n, shape.m0);
    let m: usize = m0 + shape.agent_dims.iter().sum::<usize>();
    let zero = |r: usize, cols: usize| DMatrix::zeros(r, cols);
    let mf = shape.mean_field;
    let a = draw(n, n);
    let a_bar = if mf { draw(n, n) } else { zero(n, n) };
    let b = draw(n, m);
    let b_bar = if mf { draw(n, m) } else { zero(n, m) };
    let cc = draw(n, n);
    let c_bar = if mf { draw(n, n) } else { zero(n, n) };
    let mut d;
    let mut d_bar;
    loop {
        d = draw(n, m);
        d_bar = if mf { draw(n, m) } else { zero(n, m) };
        let d0 = d.columns(0, m0).clone_owned();
        let d0h = &d0 + d_bar.columns(0, m0);
        let ok = |x: &DMatrix<f64>| (x * x.transpose()).symmetric_eigenvalues().min() > 0.05;
        if ok(&d0) && ok(&d0h) {
            break;
        }
    }
    let mut psd = |k: usize| {
        let g = draw(k, k);
        &g * g.transpose()
    };
    let agents = shape
        .agent_dims
        .iter()
        .map(|&mi| {
            let h = psd(n);
            let q = psd(n);
            let r = DMatrix::identity(mi, mi) + psd(mi);
            let (h_bar, q_bar, r_bar) = if mf { (psd(n), psd(n), psd(mi)) } else { (zero(n, n), zero(n, n), zero(mi, mi)) };
            AgentCost { h, h_bar, q: c(q), q_bar: c(q_bar), r: c(r), r_bar: c(r_bar) }
        })
        .collect();
    GameSpec {
        n,
        m0,
        agent_dims: shape.agent_dims.clone(),
        horizon: shape.horizon,
        dynamics: Dynamics { a: c(a), a_bar: c(a_bar), b: c(b), b_bar: c(b_bar), c: c(cc), c_bar: c(c_bar), d: c(d), d_bar: c(d_bar) },
        agents,
        h3_asserted: false,
    }
}
