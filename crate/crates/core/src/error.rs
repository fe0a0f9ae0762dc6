//! Error and result types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or parameter dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A class label is outside `0..class_count`.
    #[error("label {label} out of range for {class_count} classes")]
    Label { label: usize, class_count: usize },

    /// A binary input did not match the expected layout.
    #[error("format error: {0}")]
    Format(String),

    /// Paired inputs disagree (e.g. image count vs label count).
    #[error("consistency error: {0}")]
    Consistency(String),

    /// Invalid configuration value or combination.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Evaluation requested on data it cannot be computed from.
    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
