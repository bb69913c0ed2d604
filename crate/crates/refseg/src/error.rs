use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by the tensor engine, model code, data generator and harness.
#[derive(Debug)]
pub enum Error {
    /// Two operands have incompatible shapes; names both shapes.
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    /// A layer or op was built with parameters that cannot produce a valid output.
    InvalidConfig(String),
    /// A word index fell outside the vocabulary.
    Vocabulary { index: usize, vocab_size: usize },
    /// Tokenizing an empty referring expression.
    EmptyExpression,
    /// Region id outside 1..=7.
    Region { id: usize },
    /// A parameter was read for an update before its gradient was populated.
    MissingGrad { name: String },
    /// A sample cannot be used for training (e.g. box center off the grid).
    Data(String),
    /// Scene generation failed (e.g. no placement found after the retry budget).
    Generation(String),
    /// Training aborted because the loss became non-finite.
    Diverged { step: usize, stage: usize },
    /// Malformed config, annotation, checkpoint or image file.
    Parse(String),
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { op, left, right } => {
                write!(f, "{op}: shape mismatch between {left:?} and {right:?}")
            }
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Vocabulary { index, vocab_size } => {
                write!(f, "word index {index} out of range for vocabulary of {vocab_size}")
            }
            Error::EmptyExpression => write!(f, "referring expression is empty"),
            Error::Region { id } => write!(f, "region id {id} outside 1..=7"),
            Error::MissingGrad { name } => {
                write!(f, "parameter '{name}' has no gradient; run backward first")
            }
            Error::Data(msg) => write!(f, "bad sample: {msg}"),
            Error::Generation(msg) => write!(f, "scene generation failed: {msg}"),
            Error::Diverged { step, stage } => {
                write!(f, "non-finite loss at stage {stage} step {step}")
            }
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}
