use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes that an operation cannot combine.
    #[error("dimension error in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("rank error in {op}: unsupported shape {shape:?}")]
    Rank { op: &'static str, shape: Vec<usize> },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("numeric-domain error: {0}")]
    NumericDomain(String),

    /// Violated precondition of an operation.
    #[error("contract error: {0}")]
    Contract(String),

    /// Invalid configuration, qualified by the offending key path.
    #[error("config error at {path}: {message}")]
    Config { path: String, message: String },

    #[error("training diverged: {0}")]
    Divergence(String),

    /// Checkpoint container corruption.
    #[error("integrity error in {blob}: {message}")]
    Integrity { blob: String, message: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable category, used by the CLI's one-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Rank { .. } => "rank",
            Error::NonFinite { .. } => "non_finite",
            Error::NumericDomain(_) => "numeric_domain",
            Error::Contract(_) => "contract",
            Error::Config { .. } => "config",
            Error::Divergence(_) => "divergence",
            Error::Integrity { .. } => "integrity",
            Error::Io(_) => "io",
        }
    }
}
