//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: lhs shape {lhs:?}, rhs shape {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape error in {op}: got {shape:?}, {what}")]
    BadShape {
        op: &'static str,
        shape: Vec<usize>,
        what: String,
    },

    #[error("degenerate softmax row {row}: every entry is -inf")]
    DegenerateRow { row: usize },

    #[error("index error in {op}: {what}")]
    BadIndex { op: &'static str, what: String },

    #[error("vocab error: token id {id} out of range for vocab_size {vocab}")]
    VocabError { id: u32, vocab: usize },

    #[error("numeric fault at layer {layer}: {what}")]
    NumericFault { layer: usize, what: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("every token of example {example} was skimmed; nothing left to process")]
    EmptySequence { example: usize },

    #[error("skim state invariant broken: {0}")]
    SkimStateInvariant(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("length error: sequence of length {len} exceeds max_len {max_len}")]
    LengthError { len: usize, max_len: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("compatibility error: {0}")]
    Compatibility(String),

    #[error("malformed input at {path}: {what}")]
    Malformed { path: String, what: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
