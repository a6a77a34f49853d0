use alloc::string::String;

/// Assumptions a problem may fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assumption {
    H1,
    H2,
    H4,
    H5,
    H6,
}

impl core::fmt::Display for Assumption {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        let s = match self {
            Assumption::H1 => "H1",
            Assumption::H2 => "H2",
            Assumption::H4 => "H4",
            Assumption::H5 => "H5",
            Assumption::H6 => "H6",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("incompatible blocks: left block {left} ({left_cols} cols) vs right block {right} ({right_rows} rows)")]
    IncompatibleBlocks {
        left: usize,
        right: usize,
        left_cols: usize,
        right_rows: usize,
    },
    #[error("invalid matrix: {0}")]
    InvalidMatrix(String),
    #[error("dimension mismatch at {field}: expected {expected:?}, found {found:?}")]
    DimensionMismatch {
        field: String,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("asymmetric weight at {field}: max deviation {deviation:e}")]
    AsymmetricWeight { field: String, deviation: f64 },
    #[error("bad partition at {field}: {reason}")]
    BadPartition { field: String, reason: String },
    #[error("assumption {assumption} violated: {detail}")]
    AssumptionViolated {
        assumption: Assumption,
        detail: String,
    },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("index {index} out of range 1..={max}")]
    OutOfRange { index: usize, max: usize },
    #[error("incomplete bundle: {0}")]
    IncompleteBundle(String),
    #[error("insufficient samples: {paths} paths, need at least 2")]
    InsufficientSamples { paths: usize },
    #[error("step too coarse at level {level}: implicit system singular, refine the grid")]
    StepTooCoarse { level: usize },
    #[error("budget exceeded: {required} work units requested, budget {budget}")]
    BudgetExceeded { required: usize, budget: usize },
    #[error("not exactly controllable: min eigenvalue {min_eigenvalue:e} <= tol {tol:e}")]
    NotExactlyControllable { min_eigenvalue: f64, tol: f64 },
    #[error("sampler mismatch: {0}")]
    SamplerMismatch(String),
    #[error("ensemble mismatch: {0}")]
    EnsembleMismatch(String),
}

pub type Result<T> = core::result::Result<T, Error>;
