use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape {
        context: String,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("modality mask must contain at least one present modality")]
    EmptyMask,

    #[error("invalid modality token `{token}`; valid tokens are fl, t1, t1c, t2")]
    MaskToken { token: String },

    #[error("unexpected label value {value} (allowed: 0, 1, 2, 4)")]
    LabelValue { value: i64 },

    #[error("patch out of bounds: origin {origin:?} size {size:?} exceeds volume shape {shape:?}")]
    PatchBounds {
        origin: Vec<usize>,
        size: Vec<usize>,
        shape: Vec<usize>,
    },

    #[error("patch size {size} along axis {axis} is not divisible by {divisor} (2^(levels-1))")]
    PatchDivisibility {
        axis: usize,
        size: usize,
        divisor: usize,
    },

    #[error("missing {modality} volume in {dir}")]
    MissingModality { modality: String, dir: PathBuf },

    #[error("missing segmentation volume in {0}")]
    MissingLabels(PathBuf),

    #[error("NIfTI error in {path}: {reason}")]
    Nifti { path: PathBuf, reason: String },

    #[error("non-finite value in loss term `{term}` ({breakdown})")]
    NonFinite { term: String, breakdown: String },

    #[error("config hash mismatch: checkpoint has {stored}, expected {expected}")]
    HashMismatch { stored: String, expected: String },

    #[error("checkpoint component `{component}` is missing or corrupt: {reason}")]
    Checkpoint { component: String, reason: String },

    #[error("checkpoint was trained for mask {checkpoint} but evaluation requested {requested}")]
    MaskMismatch {
        checkpoint: String,
        requested: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("toml decode error in {path}: {reason}")]
    Toml { path: PathBuf, reason: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape {
            context: context.into(),
            expected: expected.to_vec(),
            actual: actual.to_vec(),
        }
    }

    /// Coarse category used by the command line for exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_)
            | Error::EmptyMask
            | Error::MaskToken { .. }
            | Error::PatchDivisibility { .. }
            | Error::HashMismatch { .. }
            | Error::MaskMismatch { .. } => ErrorKind::Config,
            Error::NonFinite { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
