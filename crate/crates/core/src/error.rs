use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "infeasible sparsity {sparsity} for layer of dim {dim}: s*d + K*L exceeds c2*d = {budget} \
         even at K=1; lower the sparsity or raise c2"
    )]
    InfeasibleSparsity {
        sparsity: f64,
        dim: usize,
        budget: f64,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error("malformed model or index file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Failures while reading extreme-classification text files.
#[derive(Debug, Error)]
pub enum DataError {
    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("line {line}: label {label} out of range (num_labels = {num_labels})")]
    LabelOutOfRange {
        line: usize,
        label: u64,
        num_labels: usize,
    },

    #[error("line {line}: feature {feature} out of range (num_features = {num_features})")]
    FeatureOutOfRange {
        line: usize,
        feature: u64,
        num_features: usize,
    },

    #[error("line {line}: empty label set")]
    EmptyLabelSet { line: usize },

    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },

    #[error("header declares {expected} examples but found {found}")]
    CountMismatch { expected: usize, found: usize },
}
