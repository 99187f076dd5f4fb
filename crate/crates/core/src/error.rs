use std::path::PathBuf;

/// Errors produced by the eviction engine, the simulator and the harness.
///
/// Every variant carries a stable kebab-case code (see [`Error::code`]) so that
/// callers and reports can match on failure kinds without parsing messages.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty-matrix: attention matrix has no cells")]
    EmptyMatrix,

    #[error("invalid-threshold: {0} is not a non-negative number")]
    InvalidThreshold(f64),

    #[error("invalid-row: {0}")]
    InvalidRow(String),

    #[error("length-mismatch: {what} ({left} vs {right})")]
    LengthMismatch {
        what: &'static str,
        left: usize,
        right: usize,
    },

    #[error("no-text-context: at least one text row is required")]
    NoTextContext,

    #[error("no-visual-tokens: at least one visual column is required")]
    NoVisualTokens,

    #[error("undefined-overlap: the first-layer eviction set is empty")]
    UndefinedOverlap,

    #[error("row-cache-misalignment: row has {row} probabilities, cache holds {cache} entries")]
    RowCacheMisalignment { row: usize, cache: usize },

    #[error("buffer-overflow: cache would reach {size} entries with limit {limit}")]
    BufferOverflow { size: usize, limit: usize },

    #[error("insufficient-entries: asked for {k} of {len}")]
    InsufficientEntries { k: usize, len: usize },

    #[error("invalid-budget: {0}")]
    InvalidBudget(String),

    #[error("invalid-decay: lambda {0} is outside (0, 1)")]
    InvalidDecay(f64),

    #[error("vacuous-bound: epsilon exceeds attn_max, threshold is {q}")]
    VacuousBound { q: f64 },

    #[error("undefined: {0}")]
    Undefined(&'static str),

    #[error("invalid-config: {0}")]
    InvalidConfig(String),

    #[error("config-mismatch: {0}")]
    ConfigMismatch(String),

    #[error("spec-error: {path}: {message}")]
    Spec { path: String, message: String },

    #[error("format-error: {0}")]
    Format(String),

    #[error("empty-report: no records to write")]
    EmptyReport,

    #[error("io-error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse-error: {0}")]
    Parse(#[from] serde_json::Error),
}

impl Error {
    /// Stable identifier of the failure kind.
    pub fn code(&self) -> &'static str {
        match self {
            Error::EmptyMatrix => "empty-matrix",
            Error::InvalidThreshold(_) => "invalid-threshold",
            Error::InvalidRow(_) => "invalid-row",
            Error::LengthMismatch { .. } => "length-mismatch",
            Error::NoTextContext => "no-text-context",
            Error::NoVisualTokens => "no-visual-tokens",
            Error::UndefinedOverlap => "undefined-overlap",
            Error::RowCacheMisalignment { .. } => "row-cache-misalignment",
            Error::BufferOverflow { .. } => "buffer-overflow",
            Error::InsufficientEntries { .. } => "insufficient-entries",
            Error::InvalidBudget(_) => "invalid-budget",
            Error::InvalidDecay(_) => "invalid-decay",
            Error::VacuousBound { .. } => "vacuous-bound",
            Error::Undefined(_) => "undefined",
            Error::InvalidConfig(_) => "invalid-config",
            Error::ConfigMismatch(_) => "config-mismatch",
            Error::Spec { .. } => "spec-error",
            Error::Format(_) => "format-error",
            Error::EmptyReport => "empty-report",
            Error::Io { .. } => "io-error",
            Error::Parse(_) => "parse-error",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
