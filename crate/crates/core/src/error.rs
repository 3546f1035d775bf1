use std::fmt;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// What a CSV row or header violated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchemaErrorKind {
    MissingColumn,
    BadType,
    UnsortedTimestamps,
    DuplicateId,
    NonFinite,
}

impl fmt::Display for SchemaErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            SchemaErrorKind::MissingColumn => "missing-column",
            SchemaErrorKind::BadType => "bad-type",
            SchemaErrorKind::UnsortedTimestamps => "unsorted-timestamps",
            SchemaErrorKind::DuplicateId => "duplicate-id",
            SchemaErrorKind::NonFinite => "non-finite",
        };
        f.write_str(s)
    }
}

/// Location-tagged validation failure raised by the CSV readers.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{}:{line}: column `{column}`: {kind}: {message}", file.display())]
pub struct SchemaError {
    pub file: PathBuf,
    /// 1-based line number (0 when the error concerns the whole file).
    pub line: usize,
    pub column: String,
    pub kind: SchemaErrorKind,
    pub message: String,
}

impl SchemaError {
    pub fn new(
        file: impl Into<PathBuf>,
        line: usize,
        column: impl Into<String>,
        kind: SchemaErrorKind,
        message: impl Into<String>,
    ) -> Self {
        Self {
            file: file.into(),
            line,
            column: column.into(),
            kind,
            message: message.into(),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("labels contain a single class; need both positive and negative samples")]
    SingleClass,

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("input length {got} does not match expected {expected} ({context})")]
    LengthMismatch {
        context: String,
        expected: usize,
        got: usize,
    },

    #[error(
        "rejection budget exhausted: {rejections} rejected draws while only {accepted}/{requested} samples accepted"
    )]
    RejectionBudget {
        rejections: usize,
        accepted: usize,
        requested: usize,
    },

    #[error("predicate `{predicate}` references feature index {index}, but vectors have length {len}")]
    PredicateIndexOutOfRange {
        predicate: String,
        index: usize,
        len: usize,
    },

    #[error("patient `{patient}` has an empty outcome series")]
    UnlabeledPatient { patient: String },

    #[error("all variables exceeded the missingness threshold; cohort unusable")]
    AllVariablesDropped,

    #[error("fold {fold} training split contains a single class")]
    DegenerateFold { fold: usize },

    #[error("perplexity {perplexity} infeasible for {n} points (requires perplexity < (n-1)/3)")]
    PerplexityInfeasible { perplexity: f64, n: usize },

    #[error("tree node {node} has non-positive cover; model is corrupt")]
    ZeroCover { node: usize },

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: String, message: String },

    #[error("stage {stage}: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Schema(#[from] SchemaError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name: name.into(),
            message: message.into(),
        }
    }

    pub fn in_stage(stage: impl Into<String>, source: Error) -> Self {
        Error::Stage {
            stage: stage.into(),
            source: Box::new(source),
        }
    }
}
