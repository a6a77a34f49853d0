//! Problem data, validation and assumption checks.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use nalgebra::DMatrix;

use crate::blocktensor::span_rank;
use crate::error::{Error, Result};
use crate::field::Field;

/// Default strict-positivity threshold for H2/H4 eigenvalue tests.
pub const DEFAULT_DELTA: f64 = 1e-8;
/// Symmetry tolerance on weights.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Slack allowed below zero in semidefiniteness tests.
const PSD_SLACK: f64 = 1e-12;

/// Matrix-valued coefficient, constant on `[starts[i], starts[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct Piecewise {
    pub starts: Vec<f64>,
    pub values: Vec<DMatrix<f64>>,
}

impl Piecewise {
    pub fn constant(m: DMatrix<f64>) -> Self {
        Self { starts: alloc::vec![0.0], values: alloc::vec![m] }
    }

    pub fn new(starts: Vec<f64>, values: Vec<DMatrix<f64>>) -> Self {
        Self { starts, values }
    }

    /// Value in force at time `t` (right-continuous).
    pub fn at(&self, t: f64) -> &DMatrix<f64> {
        let i = self.starts.iter().rposition(|&s| s <= t).unwrap_or(0);
        &self.values[i]
    }

    pub fn is_time_invariant(&self) -> bool {
        self.values.windows(2).all(|w| w[0] == w[1])
    }

    fn check(&self, field: &str, shape: (usize, usize), horizon: f64) -> Result<()> {
        let bad = |reason: String| Err(Error::BadPartition { field: field.into(), reason });
        if self.starts.is_empty() || self.starts.len() != self.values.len() {
            return bad(format!("{} breakpoints for {} values", self.starts.len(), self.values.len()));
        }
        if self.starts[0] != 0.0 {
            return bad(format!("first piece starts at {} instead of 0", self.starts[0]));
        }
        if self.starts.windows(2).any(|w| !(w[1] > w[0])) {
            return bad("breakpoints not strictly increasing".into());
        }
        if !(*self.starts.last().unwrap() < horizon) {
            return bad(format!("breakpoint beyond horizon {horizon}"));
        }
        for (p, v) in self.values.iter().enumerate() {
            if v.shape() != shape {
                return Err(Error::DimensionMismatch {
                    field: format!("{field} (piece {p})"),
                    expected: shape,
                    found: v.shape(),
                });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidMatrix(format!("{field} (piece {p}) has non-finite entries")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dynamics {
    pub a: Piecewise,
    pub a_bar: Piecewise,
    pub b: Piecewise,
    pub b_bar: Piecewise,
    pub c: Piecewise,
    pub c_bar: Piecewise,
    pub d: Piecewise,
    pub d_bar: Piecewise,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentCost {
    pub h: DMatrix<f64>,
    pub h_bar: DMatrix<f64>,
    pub q: Piecewise,
    pub q_bar: Piecewise,
    pub r: Piecewise,
    pub r_bar: Piecewise,
}

/// Raw problem data. The Brownian motion is scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct GameSpec {
    pub n: usize,
    /// Regulator control dimension.
    pub m0: usize,
    /// Control dimension of each agent, in order.
    pub agent_dims: Vec<usize>,
    pub horizon: f64,
    pub dynamics: Dynamics,
    pub agents: Vec<AgentCost>,
    /// Uniqueness of the equilibrium system, as asserted by the user.
    pub h3_asserted: bool,
}

impl GameSpec {
    pub fn n_agents(&self) -> usize {
        self.agent_dims.len()
    }

    /// Total agent control dimension.
    pub fn m_agents(&self) -> usize {
        self.agent_dims.iter().sum()
    }

    pub fn m(&self) -> usize {
        self.m0 + self.m_agents()
    }

    /// Dimension of the backward state `(x, y_1..y_N)`.
    pub fn backward_dim(&self) -> usize {
        (1 + self.n_agents()) * self.n
    }

    /// Column offset of agent `i` (0-based) inside the agent block.
    pub fn agent_offset(&self, i: usize) -> usize {
        self.agent_dims[..i].iter().sum()
    }

    fn providers(&self) -> Vec<(String, &Piecewise, (usize, usize))> {
        let (n, m) = (self.n, self.m());
        let dy = &self.dynamics;
        let mut out = alloc::vec![
            ("dynamics.A".into(), &dy.a, (n, n)),
            ("dynamics.A_bar".into(), &dy.a_bar, (n, n)),
            ("dynamics.B".into(), &dy.b, (n, m)),
            ("dynamics.B_bar".into(), &dy.b_bar, (n, m)),
            ("dynamics.C".into(), &dy.c, (n, n)),
            ("dynamics.C_bar".into(), &dy.c_bar, (n, n)),
            ("dynamics.D".into(), &dy.d, (n, m)),
            ("dynamics.D_bar".into(), &dy.d_bar, (n, m)),
        ];
        for (i, (ag, &mi)) in self.agents.iter().zip(&self.agent_dims).enumerate() {
            let k = i + 1;
            out.push((format!("agent[{k}].Q"), &ag.q, (n, n)));
            out.push((format!("agent[{k}].Q_bar"), &ag.q_bar, (n, n)));
            out.push((format!("agent[{k}].R"), &ag.r, (mi, mi)));
            out.push((format!("agent[{k}].R_bar"), &ag.r_bar, (mi, mi)));
        }
        out
    }

    /// Sorted union of every provider's breakpoints.
    pub fn breakpoints(&self) -> Vec<f64> {
        let mut all: Vec<f64> = self.providers().iter().flat_map(|(_, p, _)| p.starts.iter().cloned()).collect();
        all.sort_by(f64::total_cmp);
        all.dedup();
        all
    }

    /// Coefficients on each piece of the common refinement.
    pub fn pieces(&self) -> Vec<RawPiece<f64>> {
        self.breakpoints().into_iter().map(|t| self.piece_at(t)).collect()
    }

    pub fn piece_at(&self, t: f64) -> RawPiece<f64> {
        let dy = &self.dynamics;
        RawPiece {
            n: self.n,
            m0: self.m0,
            agent_dims: self.agent_dims.clone(),
            a: dy.a.at(t).clone(),
            a_bar: dy.a_bar.at(t).clone(),
            b: dy.b.at(t).clone(),
            b_bar: dy.b_bar.at(t).clone(),
            c: dy.c.at(t).clone(),
            c_bar: dy.c_bar.at(t).clone(),
            d: dy.d.at(t).clone(),
            d_bar: dy.d_bar.at(t).clone(),
            q: self.agents.iter().map(|a| a.q.at(t).clone()).collect(),
            q_bar: self.agents.iter().map(|a| a.q_bar.at(t).clone()).collect(),
            r: self.agents.iter().map(|a| a.r.at(t).clone()).collect(),
            r_bar: self.agents.iter().map(|a| a.r_bar.at(t).clone()).collect(),
            h: self.agents.iter().map(|a| a.h.clone()).collect(),
            h_bar: self.agents.iter().map(|a| a.h_bar.clone()).collect(),
        }
    }
}

/// All coefficients frozen on one piece of the time partition.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPiece<T: Field> {
    pub n: usize,
    pub m0: usize,
    pub agent_dims: Vec<usize>,
    pub a: DMatrix<T>,
    pub a_bar: DMatrix<T>,
    pub b: DMatrix<T>,
    pub b_bar: DMatrix<T>,
    pub c: DMatrix<T>,
    pub c_bar: DMatrix<T>,
    pub d: DMatrix<T>,
    pub d_bar: DMatrix<T>,
    pub q: Vec<DMatrix<T>>,
    pub q_bar: Vec<DMatrix<T>>,
    pub r: Vec<DMatrix<T>>,
    pub r_bar: Vec<DMatrix<T>>,
    pub h: Vec<DMatrix<T>>,
    pub h_bar: Vec<DMatrix<T>>,
}

impl RawPiece<f64> {
    /// Same piece over another field (exact for dyadic rationals).
    pub fn convert<U: Field>(&self) -> RawPiece<U> {
        let c = |m: &DMatrix<f64>| m.map(U::from_f64);
        let cv = |v: &Vec<DMatrix<f64>>| v.iter().map(c).collect();
        RawPiece {
            n: self.n,
            m0: self.m0,
            agent_dims: self.agent_dims.clone(),
            a: c(&self.a),
            a_bar: c(&self.a_bar),
            b: c(&self.b),
            b_bar: c(&self.b_bar),
            c: c(&self.c),
            c_bar: c(&self.c_bar),
            d: c(&self.d),
            d_bar: c(&self.d_bar),
            q: cv(&self.q),
            q_bar: cv(&self.q_bar),
            r: cv(&self.r),
            r_bar: cv(&self.r_bar),
            h: cv(&self.h),
            h_bar: cv(&self.h_bar),
        }
    }
}

fn check_symmetric(field: &str, m: &DMatrix<f64>) -> Result<()> {
    let deviation = (m - m.transpose()).amax();
    if deviation > SYMMETRY_TOL {
        return Err(Error::AsymmetricWeight { field: field.into(), deviation });
    }
    Ok(())
}

/// Checks dimensions, partitions and weight symmetry.
pub fn validate(spec: &GameSpec) -> Result<()> {
    if spec.n == 0 {
        return Err(Error::DimensionMismatch { field: "dimensions.n".into(), expected: (1, 1), found: (0, 0) });
    }
    if spec.m0 == 0 {
        return Err(Error::DimensionMismatch { field: "dimensions.m0".into(), expected: (1, 1), found: (0, 0) });
    }
    if spec.agent_dims.is_empty() {
        return Err(Error::DimensionMismatch { field: "dimensions.agents".into(), expected: (1, 1), found: (0, 0) });
    }
    if let Some(i) = spec.agent_dims.iter().position(|&m| m == 0) {
        return Err(Error::DimensionMismatch { field: format!("dimensions.m{}", i + 1), expected: (1, 1), found: (0, 0) });
    }
    if !(spec.horizon > 0.0 && spec.horizon.is_finite()) {
        return Err(Error::BadPartition { field: "horizon".into(), reason: format!("T = {} is not positive", spec.horizon) });
    }
    if spec.agents.len() != spec.n_agents() {
        return Err(Error::DimensionMismatch {
            field: "agents".into(),
            expected: (spec.n_agents(), 1),
            found: (spec.agents.len(), 1),
        });
    }
    for (name, p, shape) in spec.providers() {
        p.check(&name, shape, spec.horizon)?;
    }
    let n = spec.n;
    for (i, ag) in spec.agents.iter().enumerate() {
        let k = i + 1;
        for (name, m) in [("H", &ag.h), ("H_bar", &ag.h_bar)] {
            let field = format!("agent[{k}].{name}");
            if m.shape() != (n, n) {
                return Err(Error::DimensionMismatch { field, expected: (n, n), found: m.shape() });
            }
            check_symmetric(&field, m)?;
        }
        for (name, p) in [("Q", &ag.q), ("Q_bar", &ag.q_bar), ("R", &ag.r), ("R_bar", &ag.r_bar)] {
            for (j, v) in p.values.iter().enumerate() {
                check_symmetric(&format!("agent[{k}].{name} (piece {j})"), v)?;
            }
        }
    }
    Ok(())
}

/// Outcome of one assumption test with its numeric evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct Verdict {
    pub holds: bool,
    pub evidence: Vec<(String, f64)>,
    /// Names of the evidence items that failed.
    pub failures: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self { holds: true, evidence: Vec::new(), failures: Vec::new() }
    }

    fn record(&mut self, name: String, value: f64, ok: bool) {
        self.holds &= ok;
        if !ok {
            self.failures.push(format!("{name}={value:e}"));
        }
        self.evidence.push((name, value));
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssumptionReport {
    pub h1: Verdict,
    pub h2: Verdict,
    pub h4: Verdict,
    pub h4_prime: Verdict,
    pub h5: Verdict,
    pub h6: Verdict,
    pub h3_user_asserted: bool,
    pub delta: f64,
}

fn sym_eigs(m: &DMatrix<f64>) -> Vec<f64> {
    let s = (m + m.transpose()) * 0.5;
    s.symmetric_eigenvalues().iter().cloned().collect()
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    sym_eigs(m).into_iter().fold(f64::INFINITY, f64::min)
}

/// Runs every assumption test; never fails on a valid spec.
pub fn check_assumptions(spec: &GameSpec, delta: f64) -> AssumptionReport {
    let mut h1 = Verdict::new();
    let mut h2 = Verdict::new();
    let mut h4 = Verdict::new();
    let mut h4p = Verdict::new();
    let mut h5 = Verdict::new();
    let mut h6 = Verdict::new();

    for (i, ag) in spec.agents.iter().enumerate() {
        let k = i + 1;
        let psd = |m: &DMatrix<f64>| {
            let e = min_eig(m);
            (e, e >= -PSD_SLACK * m.amax().max(1.0))
        };
        let (e, ok) = psd(&ag.h);
        h1.record(format!("agent[{k}].H min_eig"), e, ok);
        let (e, ok) = psd(&(&ag.h + &ag.h_bar));
        h1.record(format!("agent[{k}].H+H_bar min_eig"), e, ok);
        for (j, q) in ag.q.values.iter().enumerate() {
            let (e, ok) = psd(q);
            h1.record(format!("agent[{k}].Q (piece {j}) min_eig"), e, ok);
        }
        for t in spec.breakpoints() {
            let (e, ok) = psd(&(ag.q.at(t) + ag.q_bar.at(t)));
            h1.record(format!("agent[{k}].Q+Q_bar (t={t}) min_eig"), e, ok);
        }
        for t in spec.breakpoints() {
            let r = ag.r.at(t);
            let rh = r + ag.r_bar.at(t);
            for (name, m) in [("R", r.clone()), ("R+R_bar", rh)] {
                let eigs = sym_eigs(&m);
                let lo = eigs.iter().cloned().fold(f64::INFINITY, f64::min);
                h1.record(format!("agent[{k}].{name} (t={t}) min_eig"), lo, lo >= delta);
                let amin = eigs.iter().map(|e| e.abs()).fold(f64::INFINITY, f64::min);
                let amax = eigs.iter().map(|e| e.abs()).fold(0.0, f64::max);
                h2.record(format!("agent[{k}].{name} (t={t}) min_abs_eig"), amin, amin >= delta);
                h2.record(format!("agent[{k}].{name} (t={t}) cond"), amax / amin, amin >= delta);
            }
        }
    }

    let m0 = spec.m0;
    for t in spec.breakpoints() {
        let d0 = spec.dynamics.d.at(t).columns(0, m0).clone_owned();
        let d0h = &d0 + spec.dynamics.d_bar.at(t).columns(0, m0);
        for (name, m) in [("D0 D0^T", &d0), ("D0_hat D0_hat^T", &d0h)] {
            let e = min_eig(&(m * m.transpose()));
            h4.record(format!("{name} (t={t}) min_eig"), e, e >= delta);
        }
        for (name, m) in [("rank D0", &d0), ("rank D0_hat", &d0h)] {
            let r = span_rank(m, crate::blocktensor::DEFAULT_TOL_REL).map(|s| s.rank).unwrap_or(0);
            h4p.record(format!("{name} (t={t})"), r as f64, r == spec.n);
        }
    }

    for (name, p, _) in spec.providers() {
        h5.record(format!("{name} pieces"), p.values.len() as f64, p.is_time_invariant());
    }

    let dy = &spec.dynamics;
    let mut barred: Vec<(String, &Piecewise)> = alloc::vec![
        ("dynamics.A_bar".into(), &dy.a_bar),
        ("dynamics.B_bar".into(), &dy.b_bar),
        ("dynamics.C_bar".into(), &dy.c_bar),
        ("dynamics.D_bar".into(), &dy.d_bar),
    ];
    for (i, ag) in spec.agents.iter().enumerate() {
        barred.push((format!("agent[{}].Q_bar", i + 1), &ag.q_bar));
        barred.push((format!("agent[{}].R_bar", i + 1), &ag.r_bar));
    }
    for (name, p) in barred {
        let mx = p.values.iter().map(|v| v.amax()).fold(0.0, f64::max);
        h6.record(format!("{name} max_abs"), mx, mx == 0.0);
    }

    AssumptionReport {
        h1,
        h2,
        h4,
        h4_prime: h4p,
        h5,
        h6,
        h3_user_asserted: spec.h3_asserted,
        delta,
    }
}

/// Errors out unless the listed assumptions hold.
pub fn require(report: &AssumptionReport, which: &[crate::error::Assumption]) -> Result<()> {
    use crate::error::Assumption as A;
    for a in which {
        let v = match a {
            A::H1 => &report.h1,
            A::H2 => &report.h2,
            A::H4 => &report.h4,
            A::H5 => &report.h5,
            A::H6 => &report.h6,
        };
        if !v.holds {
            return Err(Error::AssumptionViolated { assumption: *a, detail: v.failures.join(", ") });
        }
    }
    Ok(())
}
