use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index {index} out of range for {len} data points")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("operation not supported for {0} models")]
    UnsupportedModel(&'static str),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("sampler failure: {0}")]
    SamplerFailure(String),

    #[error("optimization failure: {0}")]
    OptimizationFailure(String),

    #[error("linear algebra failure: {0}")]
    LinearAlgebra(String),

    #[error("non-finite potential (datum {datum:?}, draw {draw})")]
    NonFinitePotential { datum: Option<usize>, draw: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("degenerate matrix: {0}")]
    Degenerate(String),

    #[error("precondition violated: {0}")]
    Precondition(String),

    #[error("iteration {iteration}: {source}")]
    AtIteration {
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_iteration(self, iteration: usize) -> Self {
        Error::AtIteration { iteration, source: Box::new(self) }
    }
}
