use thiserror::Error;

/// Errors raised by the linear-algebra substrate, the tuners and the train engine.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("rank {rank} out of range (must satisfy 1 <= r <= {max})")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("column {col} has norm {norm:e}, too small to normalize")]
    DegenerateColumn { col: usize, norm: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("cached singular factors do not reconstruct the weight (relative residual {0:e})")]
    FactorMismatch(f64),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("forward cache does not match the model: {0}")]
    CacheMismatch(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
