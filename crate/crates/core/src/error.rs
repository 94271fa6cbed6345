use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("sampled recurrent matrix is all zero (p_er={p_er} too small for n={n})")]
    EmptyRecurrentMatrix { n: usize, p_er: f64 },

    #[error("recurrent matrix has zero spectral radius; cannot rescale (re-seed or raise p_er)")]
    DegenerateSpectrum,

    #[error("eigenvalue estimation did not converge: {0}")]
    EigenNoConvergence(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite gradient at minibatch {step} ({what}); learning rate too large?")]
    NonFiniteGradient { step: u64, what: &'static str },

    #[error("stimulus bank too small: need {needed} distinct elements, have {available}")]
    InsufficientBank { needed: usize, available: usize },

    #[error("data file not found: {0}")]
    DataMissing(String),

    #[error("malformed IDX data: {0}")]
    Idx(String),

    #[error("training sample {sample} re-read after its task was sealed")]
    SampleRevisited { sample: u64 },

    #[error("protocol mismatch: {0}")]
    ProtocolMismatch(String),

    #[error("undefined metric: {0}")]
    Undefined(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
