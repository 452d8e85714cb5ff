use std::path::PathBuf;

/// Errors produced anywhere in the detector, its data pipeline or its harness.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid axis {axis} for shape {shape:?}")]
    Axis { axis: usize, shape: Vec<usize> },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("size error: {0}")]
    Size(String),
    #[error("scene generation failed for seed {seed}: {reason}")]
    Generation { seed: u64, reason: String },
    #[error("parse error in field `{field}`: {reason}")]
    Parse { field: String, reason: String },
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("image codec error for {path}: {reason}")]
    Image { path: PathBuf, reason: String },
    #[error("training aborted at step {step}: {reason}")]
    Aborted { step: usize, reason: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
