use thiserror::Error;

/// Errors raised anywhere in the simulation and estimation chain.
#[derive(Debug, Error)]
pub enum DisacError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("infeasible scenario configuration: {0}")]
    InfeasibleConfig(String),

    #[error("rank-deficient system: column {column} is linearly dependent on the others")]
    RankDeficient { column: usize },

    #[error("ill-conditioned system (normal-matrix condition number {0:.3e})")]
    IllConditioned(f64),

    #[error("underdetermined system: {0}")]
    Underdetermined(String),

    #[error("unidentifiable parameter: {0}")]
    Unidentifiable(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DisacError>;
