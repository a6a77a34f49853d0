//! Problem files.
//!
//! ```toml
//! horizon = 1.0
//! h3_asserted = false          # optional
//!
//! [dimensions]
//! n = 2
//! m0 = 3
//! agents = [1, 1]              # control dimension of each agent
//!
//! [dynamics]
//! A = [[-1, 0], [0, -1]]       # row-major
//! B = [{ from = 0.0, value = [[...]] }, { from = 0.5, value = [[...]] }]
//! # A_bar, B_bar, C_bar, D_bar default to zero
//!
//! [agent.1]
//! H = [[1, 0], [0, 1]]
//! Q = ...
//! R = [[1]]
//!
//! [target]                     # needed by steer and pipeline
//! x0 = [1.0, -0.5]
//! xT = { kind = "linear", offset = [0, 1], slope = [1, 0] }
//! ```
//!
//! Entries may be numbers or strings such as `"-1/2"`. Terminal targets
//! are functions of `W_T`: `constant`, `linear` and `quadratic`
//! (`offset + slope W_T + curvature W_T^2`).

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Range;

use mfctl_core::model::{validate, AgentCost, Dynamics, GameSpec, Piecewise};
use mfctl_core::sde::TerminalSampler;
use nalgebra::{DMatrix, DVector};
use serde::Deserialize;
use toml::Spanned;

/// Config error with a 1-based source position when one is known.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub column: Option<usize>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.line, self.column) {
            (Some(l), Some(c)) => write!(f, "line {l}, column {c}: {}", self.message),
            _ => f.write_str(&self.message),
        }
    }
}

impl std::error::Error for ConfigError {}

fn position(src: &str, offset: usize) -> (usize, usize) {
    let before = &src[..offset.min(src.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |s| s.chars().count()) + 1;
    (line, col)
}

fn err_at(src: &str, span: Range<usize>, message: String) -> ConfigError {
    let (l, c) = position(src, span.start);
    ConfigError { line: Some(l), column: Some(c), message }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum Num {
    F(f64),
    S(String),
}

impl Num {
    fn value(&self) -> Result<f64, String> {
        match self {
            Num::F(x) => Ok(*x),
            Num::S(s) => {
                let s = s.trim();
                let parsed = match s.split_once('/') {
                    Some((a, b)) => a.trim().parse::<f64>().ok().zip(b.trim().parse::<f64>().ok()).map(|(a, b)| a / b),
                    None => s.parse().ok(),
                };
                parsed.filter(|x| x.is_finite()).ok_or_else(|| format!("cannot read {s:?} as a number"))
            }
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct PieceDoc {
    from: f64,
    value: Vec<Vec<Num>>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
enum CoefDoc {
    Matrix(Vec<Vec<Num>>),
    Pieces(Vec<PieceDoc>),
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Dims {
    n: usize,
    m0: usize,
    agents: Vec<usize>,
}

type Coef = Option<Spanned<CoefDoc>>;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct DynamicsDoc {
    #[serde(rename = "A")]
    a: Coef,
    #[serde(rename = "A_bar", default)]
    a_bar: Coef,
    #[serde(rename = "B")]
    b: Coef,
    #[serde(rename = "B_bar", default)]
    b_bar: Coef,
    #[serde(rename = "C")]
    c: Coef,
    #[serde(rename = "C_bar", default)]
    c_bar: Coef,
    #[serde(rename = "D")]
    d: Coef,
    #[serde(rename = "D_bar", default)]
    d_bar: Coef,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct AgentDoc {
    #[serde(rename = "H")]
    h: Coef,
    #[serde(rename = "H_bar", default)]
    h_bar: Coef,
    #[serde(rename = "Q")]
    q: Coef,
    #[serde(rename = "Q_bar", default)]
    q_bar: Coef,
    #[serde(rename = "R")]
    r: Coef,
    #[serde(rename = "R_bar", default)]
    r_bar: Coef,
}

/// Terminal target as a function of the terminal Brownian value.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum TerminalTarget {
    Constant { value: Vec<f64> },
    Linear { offset: Vec<f64>, slope: Vec<f64> },
    Quadratic { offset: Vec<f64>, slope: Vec<f64>, curvature: Vec<f64> },
}

impl TerminalTarget {
    fn parts(&self) -> Vec<&Vec<f64>> {
        match self {
            TerminalTarget::Constant { value } => vec![value],
            TerminalTarget::Linear { offset, slope } => vec![offset, slope],
            TerminalTarget::Quadratic { offset, slope, curvature } => vec![offset, slope, curvature],
        }
    }

    pub fn dim(&self) -> usize {
        self.parts()[0].len()
    }

    pub fn at(&self, w: f64) -> DVector<f64> {
        let p = self.parts();
        DVector::from_fn(self.dim(), |i, _| p.iter().enumerate().map(|(k, c)| c[i] * w.powi(k as i32)).sum())
    }
}

impl TerminalSampler for TerminalTarget {
    fn dim(&self) -> usize {
        TerminalTarget::dim(self)
    }
    fn sample(&self, increments: &[f64]) -> DVector<f64> {
        self.at(increments.iter().sum())
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct TargetDoc {
    x0: Vec<f64>,
    #[serde(rename = "xT")]
    x_t: Spanned<TerminalTarget>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileDoc {
    horizon: f64,
    #[serde(default)]
    h3_asserted: bool,
    dimensions: Dims,
    dynamics: DynamicsDoc,
    #[serde(default)]
    agent: BTreeMap<String, Spanned<AgentDoc>>,
    target: Option<TargetDoc>,
}

/// Initial state and terminal target of a steering problem.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub x0: DVector<f64>,
    pub x_t: TerminalTarget,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub spec: GameSpec,
    pub target: Option<Target>,
}

struct Reader<'a> {
    src: &'a str,
    horizon: f64,
}

impl Reader<'_> {
    fn matrix(&self, field: &str, span: &Range<usize>, rows: &[Vec<Num>], shape: (usize, usize)) -> Result<DMatrix<f64>, ConfigError> {
        let bad = |m: String| err_at(self.src, span.clone(), format!("{field}: {m}"));
        // an empty list stands for a matrix with no rows
        let found_cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != found_cols) {
            return Err(bad("rows have different lengths".into()));
        }
        let zero_sized = shape.0 == 0 || shape.1 == 0;
        if !(zero_sized && rows.iter().all(|r| r.is_empty())) && (rows.len(), found_cols) != shape {
            return Err(bad(format!("expected {}x{}, found {}x{}", shape.0, shape.1, rows.len(), found_cols)));
        }
        let mut m = DMatrix::zeros(shape.0, shape.1);
        for (i, row) in rows.iter().enumerate() {
            for (j, x) in row.iter().enumerate() {
                m[(i, j)] = x.value().map_err(&bad)?;
            }
        }
        Ok(m)
    }

    fn coef(&self, field: &str, doc: &Coef, shape: (usize, usize), default_zero: bool, at: &Range<usize>) -> Result<Piecewise, ConfigError> {
        let Some(doc) = doc else {
            return if default_zero {
                Ok(Piecewise::constant(DMatrix::zeros(shape.0, shape.1)))
            } else {
                let message = format!("missing {field}");
                Err(if at.is_empty() { ConfigError { line: None, column: None, message } } else { err_at(self.src, at.clone(), message) })
            };
        };
        let span = doc.span();
        match doc.get_ref() {
            CoefDoc::Matrix(rows) => Ok(Piecewise::constant(self.matrix(field, &span, rows, shape)?)),
            CoefDoc::Pieces(pieces) => {
                if pieces.is_empty() {
                    return Err(err_at(self.src, span, format!("{field}: empty piece list")));
                }
                let starts: Vec<f64> = pieces.iter().map(|p| p.from).collect();
                if starts[0] != 0.0 || starts.windows(2).any(|w| !(w[1] > w[0])) || !(*starts.last().unwrap() < self.horizon) {
                    return Err(err_at(
                        self.src,
                        span,
                        format!("{field}: breakpoints must start at 0, increase strictly and stay below the horizon, found {starts:?}"),
                    ));
                }
                let values = pieces
                    .iter()
                    .enumerate()
                    .map(|(k, p)| self.matrix(&format!("{field} (piece {k})"), &span, &p.value, shape))
                    .collect::<Result<Vec<_>, _>>()?;
                Ok(Piecewise::new(starts, values))
            }
        }
    }

    fn constant(&self, field: &str, doc: &Coef, shape: (usize, usize), default_zero: bool, at: &Range<usize>) -> Result<DMatrix<f64>, ConfigError> {
        let p = self.coef(field, doc, shape, default_zero, at)?;
        if p.values.len() != 1 {
            let span = doc.as_ref().map_or(at.clone(), |d| d.span());
            return Err(err_at(self.src, span, format!("{field}: terminal weights cannot be piecewise")));
        }
        Ok(p.values.into_iter().next().unwrap())
    }
}

/// Parses and validates a problem file.
pub fn parse_problem(src: &str) -> Result<Problem, ConfigError> {
    let doc: FileDoc = toml::from_str(src).map_err(|e| {
        let (line, column) = e.span().map(|s| position(src, s.start)).unzip();
        ConfigError { line, column, message: e.message().trim().to_string() }
    })?;
    let whole = 0..0;
    let Dims { n, m0, agents } = doc.dimensions.clone();
    if n == 0 {
        return Err(ConfigError { line: None, column: None, message: "dimensions.n must be positive".into() });
    }
    let m = m0 + agents.iter().sum::<usize>();
    let rd = Reader { src, horizon: doc.horizon };
    let dy = &doc.dynamics;
    let dynamics = Dynamics {
        a: rd.coef("dynamics.A", &dy.a, (n, n), false, &whole)?,
        a_bar: rd.coef("dynamics.A_bar", &dy.a_bar, (n, n), true, &whole)?,
        b: rd.coef("dynamics.B", &dy.b, (n, m), false, &whole)?,
        b_bar: rd.coef("dynamics.B_bar", &dy.b_bar, (n, m), true, &whole)?,
        c: rd.coef("dynamics.C", &dy.c, (n, n), false, &whole)?,
        c_bar: rd.coef("dynamics.C_bar", &dy.c_bar, (n, n), true, &whole)?,
        d: rd.coef("dynamics.D", &dy.d, (n, m), false, &whole)?,
        d_bar: rd.coef("dynamics.D_bar", &dy.d_bar, (n, m), true, &whole)?,
    };
    let numbered: BTreeMap<usize, &Spanned<AgentDoc>> = doc.agent.iter().filter_map(|(k, v)| Some((k.parse().ok()?, v))).collect();
    if numbered.len() != doc.agent.len() || numbered.keys().copied().ne(1..=agents.len()) {
        let found: Vec<&String> = doc.agent.keys().collect();
        return Err(ConfigError {
            line: None,
            column: None,
            message: format!("expected sections [agent.1] .. [agent.{}], found {found:?}", agents.len()),
        });
    }
    let mut costs = Vec::with_capacity(agents.len());
    for (i, &mi) in agents.iter().enumerate() {
        let key = i + 1;
        let sp = numbered[&key];
        let at = sp.span();
        let ag = sp.get_ref();
        let f = |s: &str| format!("agent.{key}.{s}");
        costs.push(AgentCost {
            h: rd.constant(&f("H"), &ag.h, (n, n), false, &at)?,
            h_bar: rd.constant(&f("H_bar"), &ag.h_bar, (n, n), true, &at)?,
            q: rd.coef(&f("Q"), &ag.q, (n, n), false, &at)?,
            q_bar: rd.coef(&f("Q_bar"), &ag.q_bar, (n, n), true, &at)?,
            r: rd.coef(&f("R"), &ag.r, (mi, mi), false, &at)?,
            r_bar: rd.coef(&f("R_bar"), &ag.r_bar, (mi, mi), true, &at)?,
        });
    }
    let spec = GameSpec { n, m0, agent_dims: agents, horizon: doc.horizon, dynamics, agents: costs, h3_asserted: doc.h3_asserted };
    validate(&spec).map_err(|e| ConfigError { line: None, column: None, message: e.to_string() })?;
    let target = match doc.target {
        None => None,
        Some(t) => {
            if t.x0.len() != n {
                return Err(ConfigError { line: None, column: None, message: format!("target.x0: expected {n} entries, found {}", t.x0.len()) });
            }
            let span = t.x_t.span();
            let x_t = t.x_t.into_inner();
            if x_t.parts().iter().any(|p| p.len() != n) {
                return Err(err_at(src, span, format!("target.xT: every vector needs {n} entries")));
            }
            Some(Target { x0: DVector::from_vec(t.x0), x_t })
        }
    };
    Ok(Problem { spec, target })
}

pub fn read_problem(path: &std::path::Path) -> Result<Problem, ConfigError> {
    let src = std::fs::read_to_string(path)
        .map_err(|e| ConfigError { line: None, column: None, message: format!("cannot read {}: {e}", path.display()) })?;
    parse_problem(&src)
}
