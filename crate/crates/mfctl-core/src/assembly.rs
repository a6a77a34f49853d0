//! Stacked, reduced and backward-system coefficients, and the control
//! coordinate changes between the game system and its backward form.

use alloc::format;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use num_rational::BigRational;

use crate::error::{Assumption, Error, Result};
use crate::field::{block2, block_diag, identity, inverse, vstack, zeros, Field};
use crate::model::{validate, GameSpec, RawPiece};
use crate::process::{LevelProcess, TrajectoryBundle};

/// Agent data stacked over the N agents.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedCoefficients<T: Field> {
    pub a: DMatrix<T>,
    pub a_bar: DMatrix<T>,
    pub c: DMatrix<T>,
    pub c_bar: DMatrix<T>,
    pub b: DMatrix<T>,
    pub b_bar: DMatrix<T>,
    pub d: DMatrix<T>,
    pub d_bar: DMatrix<T>,
    pub r: DMatrix<T>,
    pub r_bar: DMatrix<T>,
    pub q: DMatrix<T>,
    pub q_bar: DMatrix<T>,
    pub h: DMatrix<T>,
    pub h_bar: DMatrix<T>,
}

fn agent_blocks<T: Field>(m: &DMatrix<T>, m0: usize, dims: &[usize]) -> Vec<DMatrix<T>> {
    let mut off = m0;
    dims.iter()
        .map(|&w| {
            let b = m.columns(off, w).clone_owned();
            off += w;
            b
        })
        .collect()
}

pub fn stack_agents<T: Field>(raw: &RawPiece<T>) -> StackedCoefficients<T> {
    let nag = raw.agent_dims.len();
    let rep = |m: &DMatrix<T>| block_diag(&alloc::vec![m.clone(); nag]);
    let diag_agents = |m: &DMatrix<T>| block_diag(&agent_blocks(m, raw.m0, &raw.agent_dims));
    StackedCoefficients {
        a: rep(&raw.a),
        a_bar: rep(&raw.a_bar),
        c: rep(&raw.c),
        c_bar: rep(&raw.c_bar),
        b: diag_agents(&raw.b),
        b_bar: diag_agents(&raw.b_bar),
        d: diag_agents(&raw.d),
        d_bar: diag_agents(&raw.d_bar),
        r: block_diag(&raw.r),
        r_bar: block_diag(&raw.r_bar),
        q: vstack(&raw.q),
        q_bar: vstack(&raw.q_bar),
        h: vstack(&raw.h),
        h_bar: vstack(&raw.h_bar),
    }
}

/// Coefficients of the game system after substituting the equilibrium.
#[derive(Debug, Clone, PartialEq)]
pub struct ReducedCoefficients<T: Field> {
    pub by: DMatrix<T>,
    pub by_bar: DMatrix<T>,
    pub bz: DMatrix<T>,
    pub bz_bar: DMatrix<T>,
    pub dy: DMatrix<T>,
    pub dy_bar: DMatrix<T>,
    pub dz: DMatrix<T>,
    pub dz_bar: DMatrix<T>,
    /// Inverse of the stacked agent weight.
    pub r_inv: DMatrix<T>,
    /// Inverse of the stacked mean agent weight.
    pub r_hat_inv: DMatrix<T>,
}

impl<T: Field> ReducedCoefficients<T> {
    pub fn by_hat(&self) -> DMatrix<T> {
        &self.by + &self.by_bar
    }
    pub fn bz_hat(&self) -> DMatrix<T> {
        &self.bz + &self.bz_bar
    }
    pub fn dy_hat(&self) -> DMatrix<T> {
        &self.dy + &self.dy_bar
    }
    pub fn dz_hat(&self) -> DMatrix<T> {
        &self.dz + &self.dz_bar
    }
}

fn h2_error(what: &str) -> Error {
    Error::AssumptionViolated { assumption: Assumption::H2, detail: format!("{what} is singular") }
}

pub fn reduce_nash<T: Field>(raw: &RawPiece<T>, st: &StackedCoefficients<T>) -> Result<ReducedCoefficients<T>> {
    let m0 = raw.m0;
    let ma = raw.agent_dims.iter().sum::<usize>();
    let r_inv = inverse(&st.r).ok_or_else(|| h2_error("R"))?;
    let r_hat_inv = inverse(&(&st.r + &st.r_bar)).ok_or_else(|| h2_error("R + R_bar"))?;

    let b = raw.b.columns(m0, ma).clone_owned();
    let d = raw.d.columns(m0, ma).clone_owned();
    let b_hat = &b + raw.b_bar.columns(m0, ma);
    let d_hat = &d + raw.d_bar.columns(m0, ma);
    let bt = st.b.transpose();
    let dt = st.d.transpose();
    let bt_hat = (&st.b + &st.b_bar).transpose();
    let dt_hat = (&st.d + &st.d_bar).transpose();

    let plain = |left: &DMatrix<T>, right: &DMatrix<T>| -(left * &r_inv * right);
    let hat = |left: &DMatrix<T>, right: &DMatrix<T>| -(left * &r_hat_inv * right);

    let by = plain(&b, &bt);
    let bz = plain(&b, &dt);
    let dy = plain(&d, &bt);
    let dz = plain(&d, &dt);
    let by_bar = hat(&b_hat, &bt_hat) - &by;
    let bz_bar = hat(&b_hat, &dt_hat) - &bz;
    let dy_bar = hat(&d_hat, &bt_hat) - &dy;
    let dz_bar = hat(&d_hat, &dt_hat) - &dz;
    Ok(ReducedCoefficients { by, by_bar, bz, bz_bar, dy, dy_bar, dz, dz_bar, r_inv, r_hat_inv })
}

/// Coefficients of the backward system in `y = (x, y_agents)`,
/// `z = (q, z_agents)` with control `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardCoefficients<T: Field> {
    pub a1: DMatrix<T>,
    pub a2: DMatrix<T>,
    pub c1: DMatrix<T>,
    pub c2: DMatrix<T>,
    pub b1: DMatrix<T>,
    pub a1_hat: DMatrix<T>,
    pub a2_hat: DMatrix<T>,
    pub c1_hat: DMatrix<T>,
    pub c2_hat: DMatrix<T>,
    pub b1_hat: DMatrix<T>,
    pub a: DMatrix<T>,
    pub a_bar: DMatrix<T>,
    pub c: DMatrix<T>,
    pub c_bar: DMatrix<T>,
    pub b: DMatrix<T>,
    pub b_bar: DMatrix<T>,
    /// Right inverse of the regulator diffusion, `D0^T (D0 D0^T)^-1`.
    pub d0_pinv: DMatrix<T>,
    pub d0_hat_pinv: DMatrix<T>,
    /// Projector onto the kernel of `D0`.
    pub d0_kernel: DMatrix<T>,
    pub d0_hat_kernel: DMatrix<T>,
}

impl<T: Field> BackwardCoefficients<T> {
    pub fn a_hat(&self) -> DMatrix<T> {
        &self.a + &self.a_bar
    }
    pub fn c_hat(&self) -> DMatrix<T> {
        &self.c + &self.c_bar
    }
    pub fn b_hat(&self) -> DMatrix<T> {
        &self.b + &self.b_bar
    }
    pub fn dim(&self) -> usize {
        self.a.nrows()
    }
}

fn h4_error(what: &str) -> Error {
    Error::AssumptionViolated { assumption: Assumption::H4, detail: format!("{what} is singular") }
}

/// Right inverse and kernel projector of a full-row-rank matrix. When the
/// matrix is square the projector is exactly zero.
fn right_inverse<T: Field>(d: &DMatrix<T>, what: &str) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let gram_inv = inverse(&(d * d.transpose())).ok_or_else(|| h4_error(what))?;
    let pinv = d.transpose() * gram_inv;
    let m = d.ncols();
    let kernel = if m == d.nrows() { zeros(m, m) } else { identity::<T>(m) - &pinv * d };
    Ok((pinv, kernel))
}

pub fn assemble_backward<T: Field>(
    raw: &RawPiece<T>,
    st: &StackedCoefficients<T>,
    red: &ReducedCoefficients<T>,
) -> Result<BackwardCoefficients<T>> {
    let (n, m0) = (raw.n, raw.m0);
    let b0 = raw.b.columns(0, m0).clone_owned();
    let d0 = raw.d.columns(0, m0).clone_owned();
    let b0_hat = &b0 + raw.b_bar.columns(0, m0);
    let d0_hat = &d0 + raw.d_bar.columns(0, m0);
    let (p, ker) = right_inverse(&d0, "D0 D0^T")?;
    let (ph, ker_h) = right_inverse(&d0_hat, "D0_hat D0_hat^T")?;

    let bp = &b0 * &p;
    let bph = &b0_hat * &ph;
    let a1 = &raw.a - &bp * &raw.c;
    let a1_hat = (&raw.a + &raw.a_bar) - &bph * (&raw.c + &raw.c_bar);
    let a2 = &red.by - &bp * &red.dy;
    let a2_hat = red.by_hat() - &bph * red.dy_hat();
    let c2 = &red.bz - &bp * &red.dz;
    let c2_hat = red.bz_hat() - &bph * red.dz_hat();
    let b1 = &b0 * &ker;
    let b1_hat = &b0_hat * &ker_h;
    let c1 = bp;
    let c1_hat = bph;

    let nn = st.a.nrows();
    let a = block2(&a1, &a2, &(-st.q.clone()), &(-st.a.transpose()));
    let a_bar = block2(&(&a1_hat - &a1), &(&a2_hat - &a2), &(-st.q_bar.clone()), &(-st.a_bar.transpose()));
    let c = block2(&c1, &c2, &zeros(nn, n), &(-st.c.transpose()));
    let c_bar = block2(&(&c1_hat - &c1), &(&c2_hat - &c2), &zeros(nn, n), &(-st.c_bar.transpose()));
    let b = vstack(&[b1.clone(), zeros(nn, m0)]);
    let b_bar = vstack(&[&b1_hat - &b1, zeros(nn, m0)]);
    Ok(BackwardCoefficients {
        a1,
        a2,
        c1,
        c2,
        b1,
        a1_hat,
        a2_hat,
        c1_hat,
        c2_hat,
        b1_hat,
        a,
        a_bar,
        c,
        c_bar,
        b,
        b_bar,
        d0_pinv: p,
        d0_hat_pinv: ph,
        d0_kernel: ker,
        d0_hat_kernel: ker_h,
    })
}

/// Every derived family on one piece of the time partition.
#[derive(Debug, Clone, PartialEq)]
pub struct PieceCoefficients<T: Field> {
    pub raw: RawPiece<T>,
    pub stacked: StackedCoefficients<T>,
    pub reduced: ReducedCoefficients<T>,
    pub backward: BackwardCoefficients<T>,
}

pub fn assemble_piece<T: Field>(raw: RawPiece<T>) -> Result<PieceCoefficients<T>> {
    let stacked = stack_agents(&raw);
    let reduced = reduce_nash(&raw, &stacked)?;
    let backward = assemble_backward(&raw, &stacked, &reduced)?;
    Ok(PieceCoefficients { raw, stacked, reduced, backward })
}

/// Per-piece cache of the derived coefficients of a validated spec.
#[derive(Debug, Clone, PartialEq)]
pub struct AssembledSystem {
    pub n: usize,
    pub n_agents: usize,
    pub m0: usize,
    pub horizon: f64,
    pub starts: Vec<f64>,
    pub pieces: Vec<PieceCoefficients<f64>>,
}

impl AssembledSystem {
    pub fn at(&self, t: f64) -> &PieceCoefficients<f64> {
        let i = self.starts.iter().rposition(|&s| s <= t).unwrap_or(0);
        &self.pieces[i]
    }

    pub fn dim(&self) -> usize {
        (1 + self.n_agents) * self.n
    }

    pub fn m_agents(&self) -> usize {
        self.pieces[0].stacked.r.nrows()
    }

    /// Whether every derived coefficient is the same on all pieces.
    pub fn is_time_invariant(&self) -> bool {
        self.pieces.windows(2).all(|w| w[0].raw == w[1].raw)
    }

    pub fn terminal_weights(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.pieces[0].stacked.h, &self.pieces[0].stacked.h_bar)
    }
}

pub fn assemble(spec: &GameSpec) -> Result<AssembledSystem> {
    validate(spec)?;
    let starts = spec.breakpoints();
    let pieces = spec.pieces().into_iter().map(assemble_piece).collect::<Result<Vec<_>>>()?;
    Ok(AssembledSystem {
        n: spec.n,
        n_agents: spec.n_agents(),
        m0: spec.m0,
        horizon: spec.horizon,
        starts,
        pieces,
    })
}

/// Assembly in exact rational arithmetic (inputs converted exactly).
pub fn assemble_exact(spec: &GameSpec) -> Result<Vec<PieceCoefficients<BigRational>>> {
    validate(spec)?;
    spec.pieces().iter().map(|p| assemble_piece(p.convert::<BigRational>())).collect()
}

/// Game-system quantities at one sample: state, adjoints, adjoint noise
/// and regulator control.
#[derive(Debug, Clone, PartialEq)]
pub struct GamePoint {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub z: DVector<f64>,
    pub u0: DVector<f64>,
}

/// Backward-system quantities at one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardPoint {
    pub x: DVector<f64>,
    pub y: DVector<f64>,
    pub q: DVector<f64>,
    pub z: DVector<f64>,
    pub v: DVector<f64>,
}

/// Diffusion `q` and control `v` from the regulator control.
pub fn u0_to_qv(p: &PieceCoefficients<f64>, s: &GamePoint, mean: &GamePoint) -> (DVector<f64>, DVector<f64>) {
    let (raw, red) = (&p.raw, &p.reduced);
    let m0 = raw.m0;
    let d0 = raw.d.columns(0, m0);
    let d0_hat = d0 + raw.d_bar.columns(0, m0);
    let c_hat = &raw.c + &raw.c_bar;
    let q = &raw.c * (&s.x - &mean.x)
        + &red.dy * (&s.y - &mean.y)
        + &red.dz * (&s.z - &mean.z)
        + d0 * (&s.u0 - &mean.u0)
        + c_hat * &mean.x
        + red.dy_hat() * &mean.y
        + red.dz_hat() * &mean.z
        + d0_hat * &mean.u0;
    (q, s.u0.clone())
}

/// Regulator control recovered from `(q, v)`, with consistency residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct U0Recovery {
    pub u0: DVector<f64>,
    /// Mean part of `u0`.
    pub u0_mean: DVector<f64>,
    /// Residual of the mean diffusion equation.
    pub mean_residual: f64,
    /// Residual of the centred diffusion equation.
    pub centered_residual: f64,
}

pub fn qv_to_u0(p: &PieceCoefficients<f64>, s: &BackwardPoint, mean: &BackwardPoint) -> U0Recovery {
    let (raw, red, bw) = (&p.raw, &p.reduced, &p.backward);
    let m0 = raw.m0;
    let d0 = raw.d.columns(0, m0);
    let d0_hat = d0 + raw.d_bar.columns(0, m0);
    let c_hat = &raw.c + &raw.c_bar;
    let centered = (&s.q - &mean.q) - &raw.c * (&s.x - &mean.x) - &red.dy * (&s.y - &mean.y) - &red.dz * (&s.z - &mean.z);
    let level = &mean.q - c_hat * &mean.x - red.dy_hat() * &mean.y - red.dz_hat() * &mean.z;
    let u_c = &bw.d0_pinv * &centered + &bw.d0_kernel * (&s.v - &mean.v);
    let u_m = &bw.d0_hat_pinv * &level + &bw.d0_hat_kernel * &mean.v;
    let mean_residual = (&d0_hat * &u_m - &level).norm();
    let centered_residual = (d0 * &u_c - &centered).norm();
    U0Recovery { u0: u_c + &u_m, u0_mean: u_m, mean_residual, centered_residual }
}

fn require_level(p: &Option<LevelProcess>, name: &str) -> Result<LevelProcess> {
    p.clone().ok_or_else(|| Error::IncompleteBundle(format!("{name} missing")))
}

/// Applies [`u0_to_qv`] on every step level of a bundle.
pub fn bundle_u0_to_qv(sys: &AssembledSystem, bundle: &TrajectoryBundle) -> Result<(LevelProcess, LevelProcess)> {
    let u0 = require_level(&bundle.u0, "u0")?;
    let sizes = bundle.step_sizes();
    u0.check_shape("u0", sys.m0, &sizes)?;
    let mut q = LevelProcess::zeros(sys.n, sizes.iter().cloned());
    for k in 0..bundle.steps() {
        let w = &bundle.weights[k];
        let p = sys.at(bundle.times[k]);
        let mean = GamePoint {
            x: bundle.x.mean(k, w),
            y: bundle.y_agents.mean(k, w),
            z: bundle.z_agents.mean(k, w),
            u0: u0.mean(k, w),
        };
        for j in 0..sizes[k] {
            let s = GamePoint {
                x: bundle.x.levels[k][j].clone(),
                y: bundle.y_agents.levels[k][j].clone(),
                z: bundle.z_agents.levels[k][j].clone(),
                u0: u0.levels[k][j].clone(),
            };
            q.levels[k][j] = u0_to_qv(p, &s, &mean).0;
        }
    }
    Ok((q, u0))
}

/// Applies [`qv_to_u0`] on every step level; returns `u0` and the largest
/// mean and centred residuals.
pub fn bundle_qv_to_u0(sys: &AssembledSystem, bundle: &TrajectoryBundle) -> Result<(LevelProcess, f64, f64)> {
    let q = require_level(&bundle.q, "q")?;
    let v = require_level(&bundle.v, "v")?;
    let sizes = bundle.step_sizes();
    q.check_shape("q", sys.n, &sizes)?;
    v.check_shape("v", sys.m0, &sizes)?;
    let mut u0 = LevelProcess::zeros(sys.m0, sizes.iter().cloned());
    let (mut rm, mut rc) = (0.0f64, 0.0f64);
    for k in 0..bundle.steps() {
        let w = &bundle.weights[k];
        let p = sys.at(bundle.times[k]);
        let mean = BackwardPoint {
            x: bundle.x.mean(k, w),
            y: bundle.y_agents.mean(k, w),
            q: q.mean(k, w),
            z: bundle.z_agents.mean(k, w),
            v: v.mean(k, w),
        };
        for j in 0..sizes[k] {
            let s = BackwardPoint {
                x: bundle.x.levels[k][j].clone(),
                y: bundle.y_agents.levels[k][j].clone(),
                q: q.levels[k][j].clone(),
                z: bundle.z_agents.levels[k][j].clone(),
                v: v.levels[k][j].clone(),
            };
            let r = qv_to_u0(p, &s, &mean);
            rm = rm.max(r.mean_residual);
            rc = rc.max(r.centered_residual);
            u0.levels[k][j] = r.u0;
        }
    }
    Ok((u0, rm, rc))
}
