use std::path::PathBuf;

/// Every failure the library can report.
///
/// Display strings start with the variant name so command-line callers can
/// surface it verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("ShapeMismatch: {op}: left is {left:?}, right is {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("ZeroRow: row {row} has norm below {eps:e}")]
    ZeroRow { row: usize, eps: f64 },
    #[error("InvalidDims: {0}")]
    InvalidDims(String),
    #[error("InvalidDropout: probability {0} is outside [0, 1)")]
    InvalidDropout(f64),
    #[error("EmptyBatch: {0} has no participating samples")]
    EmptyBatch(&'static str),
    #[error("TooFewClusters: {loss} needs at least 2 clusters, got {got}")]
    TooFewClusters { loss: &'static str, got: usize },
    #[error("ZeroColumn: cluster column {0} is all zero")]
    ZeroColumn(usize),
    #[error("LabelOutOfRange: label {label} with only {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("IndexOutOfRange: index {index} with only {len} rows")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("ConflictingSupervision: sample {0} has both a ground-truth and a pseudo label")]
    ConflictingSupervision(usize),
    #[error("NoLabeledData: no labeled training records")]
    NoLabeledData,
    #[error("ClassCountMismatch: {0}")]
    ClassCountMismatch(String),
    #[error("DimsMismatch: model expects {expected} input features, data has {got}")]
    DimsMismatch { expected: usize, got: usize },
    #[error("LengthMismatch: {left} predictions vs {right} labels")]
    LengthMismatch { left: usize, right: usize },
    #[error("TooFewSamples: need at least {need}, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("ParseError: line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("DimMismatch: line {line}: embedding has {got} values, expected {expected}")]
    DimMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error("UnknownSplit: line {line}: {split:?}")]
    UnknownSplit { line: usize, split: String },
    #[error("NoClasses: {0}")]
    NoClasses(String),
    #[error("InvalidParams: {0}")]
    InvalidParams(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("Checkpoint: {0}")]
    Checkpoint(String),
    #[error("Io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// The variant name, used as a stable error code.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "ShapeMismatch",
            Error::ZeroRow { .. } => "ZeroRow",
            Error::InvalidDims(_) => "InvalidDims",
            Error::InvalidDropout(_) => "InvalidDropout",
            Error::EmptyBatch(_) => "EmptyBatch",
            Error::TooFewClusters { .. } => "TooFewClusters",
            Error::ZeroColumn(_) => "ZeroColumn",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::ConflictingSupervision(_) => "ConflictingSupervision",
            Error::NoLabeledData => "NoLabeledData",
            Error::ClassCountMismatch(_) => "ClassCountMismatch",
            Error::DimsMismatch { .. } => "DimsMismatch",
            Error::LengthMismatch { .. } => "LengthMismatch",
            Error::TooFewSamples { .. } => "TooFewSamples",
            Error::ParseError { .. } => "ParseError",
            Error::DimMismatch { .. } => "DimMismatch",
            Error::UnknownSplit { .. } => "UnknownSplit",
            Error::NoClasses(_) => "NoClasses",
            Error::InvalidParams(_) => "InvalidParams",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::Checkpoint(_) => "Checkpoint",
            Error::Io { .. } => "Io",
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
