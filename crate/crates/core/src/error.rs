//! Crate-wide error type.

use std::fmt;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced anywhere in the workbench.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes incompatible with the requested operation.
    Shape(String),
    /// Invalid configuration value (unsupported kind, bad hyperparameter).
    Config(String),
    /// Value outside its mathematical domain (label out of range, etc.).
    Domain(String),
    /// API contract violation (non-scalar backward root, wrong mode...).
    Contract(String),
    /// Model specification does not compose; carries the offending layer.
    Spec { layer: usize, message: String },
    /// Training diverged or was misconfigured; names the epoch.
    Training { epoch: usize, message: String },
    /// Dataset file could not be ingested.
    Ingestion(String),
    /// Numeric overflow: a documented operation produced non-finite values.
    Overflow(String),
    /// A required defense is missing from the pool.
    EnumeratedGap(String),
    /// Eq-style percent increase is undefined (zero traditional improvement).
    UndefinedMetric(String),
    /// Checkpoint container violation.
    Checkpoint(CheckpointError),
    /// A pipeline stage failed; wraps the cause.
    Stage { stage: String, source: Box<Error> },
    Io(std::io::Error),
}

/// Distinct checkpoint failure modes, one per loader guard.
#[derive(Debug, PartialEq, Eq)]
pub enum CheckpointError {
    BadMagic,
    UnsupportedVersion(u32),
    Truncated,
    DimMismatch(String),
    Metadata(String),
    TrailingBytes,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(m) => write!(f, "shape error: {m}"),
            Error::Config(m) => write!(f, "configuration error: {m}"),
            Error::Domain(m) => write!(f, "domain error: {m}"),
            Error::Contract(m) => write!(f, "contract error: {m}"),
            Error::Spec { layer, message } => write!(f, "spec error at layer {layer}: {message}"),
            Error::Training { epoch, message } => {
                write!(f, "training error at epoch {epoch}: {message}")
            }
            Error::Ingestion(m) => write!(f, "ingestion error: {m}"),
            Error::Overflow(m) => write!(f, "numeric overflow: {m}"),
            Error::EnumeratedGap(m) => write!(f, "missing defense: {m}"),
            Error::UndefinedMetric(m) => write!(f, "undefined metric: {m}"),
            Error::Checkpoint(e) => write!(f, "checkpoint error: {e}"),
            Error::Stage { stage, source } => write!(f, "stage '{stage}' failed: {source}"),
            Error::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl fmt::Display for CheckpointError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckpointError::BadMagic => write!(f, "bad magic bytes"),
            CheckpointError::UnsupportedVersion(v) => {
                write!(f, "format version {v} is newer than supported")
            }
            CheckpointError::Truncated => write!(f, "file truncated"),
            CheckpointError::DimMismatch(m) => write!(f, "dimension mismatch: {m}"),
            CheckpointError::Metadata(m) => write!(f, "invalid metadata: {m}"),
            CheckpointError::TrailingBytes => write!(f, "trailing bytes after payload"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Stage { source, .. } => Some(source.as_ref()),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<CheckpointError> for Error {
    fn from(e: CheckpointError) -> Self {
        Error::Checkpoint(e)
    }
}

impl Error {
    /// Wrap an error with the pipeline stage it occurred in.
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(self),
        }
    }
}
