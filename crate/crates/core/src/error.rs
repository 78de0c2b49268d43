//! Error type shared by every module.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("distribution at (row {row}, col {col}) sums to {sum} (tolerance {tolerance})")]
    NotNormalized {
        row: usize,
        col: usize,
        sum: f64,
        tolerance: f64,
    },

    #[error("value {value} at (row {row}, col {col}, class {class}) is not a probability")]
    InvalidProbability {
        row: usize,
        col: usize,
        class: usize,
        value: f64,
    },

    #[error("gate has {gate} experts but the stack has {stack}")]
    GateArity { gate: usize, stack: usize },

    #[error("invalid gate: {0}")]
    InvalidGate(String),

    #[error("label {label} at (row {row}, col {col}) is out of range for {num_classes} classes")]
    LabelOutOfRange {
        row: usize,
        col: usize,
        label: u32,
        num_classes: usize,
    },

    #[error("expected a {expected} gate, got a {actual} gate")]
    GateKindMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("classwise fusion has zero mass at (row {row}, col {col})")]
    DegeneratePixel { row: usize, col: usize },

    #[error("weighted aggregation needs a simple gate (one weight per expert)")]
    WeightedNeedsSimpleGate,

    #[error("invalid distribution: {0}")]
    InvalidDistribution(String),

    #[error("uncertainty map normalizer must be positive")]
    ZeroNormalizer,

    #[error("no valid (non-ignored) pixels to evaluate")]
    NoValidPixels,

    #[error("empty image")]
    EmptyImage,

    #[error("invalid spec: {0}")]
    InvalidSpec(String),

    #[error("bad NPY magic bytes")]
    BadMagic,

    #[error("unsupported dtype {0:?}")]
    UnsupportedDtype(String),

    #[error("Fortran-order arrays are not supported")]
    FortranOrderUnsupported,

    #[error("expected an array of rank {expected}, got shape {actual:?}")]
    ShapeRankMismatch { expected: usize, actual: Vec<usize> },

    #[error("malformed NPY header: {0}")]
    BadHeader(String),

    #[error("manifest: {0}")]
    Manifest(String),

    #[error("duplicate expert id {0:?}")]
    DuplicateExpertId(String),

    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NotNormalized { .. } => "NotNormalized",
            Error::InvalidProbability { .. } => "InvalidProbability",
            Error::GateArity { .. } => "GateArity",
            Error::InvalidGate(_) => "InvalidGate",
            Error::LabelOutOfRange { .. } => "LabelOutOfRange",
            Error::GateKindMismatch { .. } => "GateKindMismatch",
            Error::DegeneratePixel { .. } => "DegeneratePixel",
            Error::WeightedNeedsSimpleGate => "WeightedNeedsSimpleGate",
            Error::InvalidDistribution(_) => "InvalidDistribution",
            Error::ZeroNormalizer => "ZeroNormalizer",
            Error::NoValidPixels => "NoValidPixels",
            Error::EmptyImage => "EmptyImage",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::BadMagic => "BadMagic",
            Error::UnsupportedDtype(_) => "UnsupportedDtype",
            Error::FortranOrderUnsupported => "FortranOrderUnsupported",
            Error::ShapeRankMismatch { .. } => "ShapeRankMismatch",
            Error::BadHeader(_) => "BadHeader",
            Error::Manifest(_) => "Manifest",
            Error::DuplicateExpertId(_) => "DuplicateExpertId",
            Error::Io { .. } => "IoFailure",
        }
    }

    /// Process exit code used by the CLI: 3 for validation failures, 4 for
    /// I/O and unreadable files.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. }
            | Error::BadMagic
            | Error::UnsupportedDtype(_)
            | Error::FortranOrderUnsupported
            | Error::ShapeRankMismatch { .. }
            | Error::BadHeader(_) => 4,
            _ => 3,
        }
    }
}
