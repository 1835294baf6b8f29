use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to write {path}: {source}")]
    Output {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record at line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("probability sum violation at line {line}: sum is {sum}")]
    ProbabilitySum { line: usize, sum: f64 },

    #[error("probability out of range at line {line}: {value}")]
    ProbabilityRange { line: usize, value: f64 },

    #[error("inconsistent number of classes at line {line}: expected {expected}, found {found}")]
    ClassCount {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("inconsistent feature dimension at line {line}: expected {expected}, found {found}")]
    FeatureDim {
        line: usize,
        expected: usize,
        found: usize,
    },

    #[error("label {label} out of range for {num_classes} classes at line {line}")]
    LabelRange {
        line: usize,
        label: usize,
        num_classes: usize,
    },

    #[error("sml_pred {given} disagrees with argmax {argmax} at line {line}")]
    PredictionMismatch {
        line: usize,
        given: usize,
        argmax: usize,
    },

    #[error("empty trace")]
    EmptyTrace,

    #[error("trace needs at least {needed} records, got {got}")]
    TooFewRecords { needed: usize, got: usize },

    #[error("class {0} has no members")]
    MissingClass(&'static str),

    #[error("record {id} has no feature vector")]
    MissingFeatures { id: String },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid policy spec `{spec}`: {reason}")]
    PolicySpec { spec: String, reason: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn output(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Output {
            path: path.into(),
            source,
        }
    }

    /// Wraps an error with the pipeline stage it came from.
    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// True when the error is caused by user input (files, flags, config)
    /// rather than an internal failure.
    pub fn is_input_error(&self) -> bool {
        match self {
            Error::Stage { source, .. } => source.is_input_error(),
            Error::Output { .. } => false,
            _ => true,
        }
    }
}
