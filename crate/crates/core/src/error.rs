use thiserror::Error;

/// Coarse error categories; the CLI maps each to its own exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    /// Tensor shape or index contract violated by the caller.
    Contract,
    /// Malformed or unreadable file (checkpoint, tokenizer, stats, plan, MCQ).
    Format,
    /// Missing file or other I/O failure.
    Io,
    /// Config could not be parsed or is inconsistent.
    Config,
    /// Stats or plan were produced for a different checkpoint.
    Fingerprint,
    /// Dataset or item set unusable (empty, no scorable entries).
    Data,
    /// NaN/Inf encountered.
    Numerical,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{what} index {index} out of range (bound {bound})")]
    Index {
        what: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tokenizer training failed: {0}")]
    Training(String),
    #[error("invalid model config: {0}")]
    Config(String),

    #[error("checkpoint has bad magic {found:?} (expected \"MGPT\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported checkpoint version {found} (this build reads {supported})")]
    UnsupportedVersion { found: u32, supported: u32 },
    #[error("checkpoint truncated while reading {what}")]
    Truncated { what: &'static str },
    #[error("checkpoint inconsistent with its config: {0}")]
    Inconsistent(String),
    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("fingerprint mismatch: artifact was produced for {expected}, checkpoint is {found}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("prune plan does not match model: {0}")]
    Plan(String),
    #[error("stats comparison failed: {0}")]
    Comparison(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid MCQ item {index}: {detail}")]
    InvalidMcq { index: usize, detail: String },
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn class(&self) -> ErrorClass {
        match self {
            Error::Shape { .. } | Error::Index { .. } | Error::Contract(_) => ErrorClass::Contract,
            Error::NonFinite { .. } | Error::NonFiniteLoss { .. } => ErrorClass::Numerical,
            Error::Config(_) => ErrorClass::Config,
            Error::BadMagic { .. }
            | Error::UnsupportedVersion { .. }
            | Error::Truncated { .. }
            | Error::Inconsistent(_)
            | Error::Format { .. }
            | Error::Json(_) => ErrorClass::Format,
            Error::FingerprintMismatch { .. } | Error::Plan(_) | Error::Comparison(_) => {
                ErrorClass::Fingerprint
            }
            Error::Training(_)
            | Error::EmptyDataset(_)
            | Error::InvalidMcq { .. }
            | Error::Evaluation(_) => ErrorClass::Data,
            Error::Io(_) => ErrorClass::Io,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
