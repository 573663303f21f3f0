use thiserror::Error;

/// Errors produced anywhere in the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },

    #[error("batch has no targets")]
    MissingTargets,

    #[error("authentication failed for caller {0:?}")]
    Unauthenticated(String),

    #[error("malformed envelope: {0}")]
    Envelope(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("remote zone reported error {code}: {message}")]
    Remote { code: u16, message: String },

    #[error("transport failure after {retries} retries: {source}")]
    Transport {
        retries: u32,
        #[source]
        source: std::io::Error,
    },

    #[error("training diverged at step {step} (loss {loss}, key kappa {kappa})")]
    Diverged { step: usize, loss: f64, kappa: f64 },

    #[error("config parse error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
