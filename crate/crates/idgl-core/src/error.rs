use thiserror::Error;

/// Error type shared across the crate.
#[derive(Debug, Error)]
pub enum IdglError {
    #[error("dimension mismatch in {op}: {lhs} vs {rhs}")]
    DimensionMismatch {
        op: &'static str,
        lhs: String,
        rhs: String,
    },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("row {0} has zero sum and safe normalization is disabled")]
    DegenerateRow(usize),

    #[error("feature row {0} has zero norm; cosine similarity is undefined")]
    DegenerateFeature(usize),

    #[error("weighted row {0} has zero norm under metric head {1}")]
    DegenerateNorm(usize, usize),

    #[error("anchor {0} is isolated (zero column sum after sparsification)")]
    IsolatedAnchor(usize),

    #[error("log barrier undefined: row {0} of the adjacency has zero degree")]
    BarrierDomain(usize),

    #[error("matrix is not symmetric (max |a - a^T| = {0:.3e})")]
    Asymmetric(f64),

    #[error("loss must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("backward already ran on this tape")]
    BackwardTwice,

    #[error("mask is empty")]
    EmptyMask,

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("recovery oracle limited to n <= {limit}, got n = {n}")]
    OracleScale { n: usize, limit: usize },

    #[error("training diverged: non-finite loss at iteration {iteration}{}",
            .epoch.map(|e| format!(" (epoch {e})")).unwrap_or_default())]
    Divergence {
        iteration: usize,
        epoch: Option<usize>,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at {file}:{line}: {msg}")]
    Parse {
        file: String,
        line: usize,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, IdglError>;

impl IdglError {
    pub(crate) fn dims(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        IdglError::DimensionMismatch {
            op,
            lhs: format!("{}x{}", lhs.0, lhs.1),
            rhs: format!("{}x{}", rhs.0, rhs.1),
        }
    }

    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        IdglError::Io {
            path: path.into(),
            source,
        }
    }
}
