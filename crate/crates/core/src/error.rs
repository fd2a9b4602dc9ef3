use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("non-finite values in {0}")]
    NonFinite(&'static str),

    #[error("{0} is not numerically positive definite")]
    NotPositiveDefinite(&'static str),

    #[error("{context} is singular (rank {rank} system)")]
    Singular { context: &'static str, rank: usize },

    #[error("requested rank {requested} exceeds achievable numerical rank {achievable}")]
    RankTooLarge { requested: usize, achievable: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("matrix market: {0}")]
    MatrixMarket(String),

    #[error("{method} at r={r}{}: {source}", replication.map(|i| format!(", replication {i}")).unwrap_or_default())]
    Annotated {
        method: String,
        r: usize,
        replication: Option<usize>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for failures of the numerics rather than of the inputs or the environment.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::NonFinite(_)
            | Error::NotPositiveDefinite(_)
            | Error::Singular { .. }
            | Error::RankTooLarge { .. } => true,
            Error::Annotated { source, .. } => source.is_numerical(),
            _ => false,
        }
    }

    pub(crate) fn annotate(self, method: &str, r: usize, replication: Option<usize>) -> Error {
        Error::Annotated {
            method: method.to_string(),
            r,
            replication,
            source: Box::new(self),
        }
    }
}
