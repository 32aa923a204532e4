use alloc::string::String;
use core::fmt;

/// Errors surfaced by the core pipeline, model, and numeric substrate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Error {
    /// Vocabulary construction over an empty corpus.
    EmptyCorpus,
    /// A sample without gold keyphrases where one is required.
    NoTarget,
    /// Invalid configuration value.
    Config(String),
    /// Shape mismatch in a numeric primitive or model input.
    Shape {
        primitive: &'static str,
        detail: String,
    },
    /// An id outside its table (e.g. a type id not in {0,1,2}).
    Index(String),
    /// An operation that requires a non-empty input received none.
    EmptyInput(&'static str),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// Stage-2 training requested without a stage-1 checkpoint.
    StageOrder(String),
    /// Malformed checkpoint payload.
    Checkpoint(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::EmptyCorpus => write!(f, "corpus is empty"),
            Error::NoTarget => write!(f, "sample has no gold keyphrases"),
            Error::Config(msg) => write!(f, "invalid config: {msg}"),
            Error::Shape { primitive, detail } => {
                write!(f, "shape mismatch in {primitive}: {detail}")
            }
            Error::Index(msg) => write!(f, "index out of range: {msg}"),
            Error::EmptyInput(what) => write!(f, "empty input to {what}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::StageOrder(msg) => write!(f, "stage order violation: {msg}"),
            Error::Checkpoint(msg) => write!(f, "bad checkpoint: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
