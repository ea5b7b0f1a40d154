use thiserror::Error;

/// Errors raised anywhere in the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("degenerate batch: batchnorm in train mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("invalid dataset spec: {0}")]
    Spec(String),
    #[error("partition error: {0}")]
    Partition(String),
    #[error("mask error: {0}")]
    Mask(String),
    #[error("proxy error: {0}")]
    Proxy(String),
    #[error("substitution error: {0}")]
    Substitution(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("cluster error: {0}")]
    Cluster(String),
    #[error("too many players for exact Shapley enumeration: {0} (max {max})", max = crate::generator_agg::MAX_EXACT_PLAYERS)]
    Size(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
