use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("graph is empty after relation filtering")]
    EmptyGraph,

    #[error("unknown {kind}: {name}")]
    Lookup { kind: &'static str, name: String },

    #[error("out-of-vocabulary word: {0:?}")]
    OutOfVocab(String),

    #[error("{0}")]
    Invalid(String),

    #[error("{0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing gradient for parameter {0}")]
    MissingGradient(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("sampling request unsatisfiable for {hops}-hop paths: achieved {achieved} of {requested}")]
    Unsatisfiable { hops: usize, achieved: usize, requested: usize },

    #[error("{0}")]
    Checkpoint(String),

    #[error("{0}")]
    Io(#[from] io::Error),

    #[error("{0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    /// Short machine-readable tag used by the CLI error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "parse",
            Error::EmptyGraph => "empty_graph",
            Error::Lookup { .. } => "lookup",
            Error::OutOfVocab(_) => "out_of_vocab",
            Error::Invalid(_) => "invalid",
            Error::Config(_) => "config",
            Error::Shape(_) => "shape",
            Error::MissingGradient(_) => "missing_gradient",
            Error::NonFinite(_) => "non_finite",
            Error::Diverged { .. } => "diverged",
            Error::Unsatisfiable { .. } => "unsatisfiable",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
