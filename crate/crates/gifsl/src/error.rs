use std::path::PathBuf;

/// Error type shared across the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class label {label} out of range for space of {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("novel head is absent (created during second-phase training)")]
    NovelHeadAbsent,
    #[error("backbone snapshot is absent (taken at the end of the previous phase)")]
    SnapshotAbsent,
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("episode sampling failed: {0}")]
    Episode(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
