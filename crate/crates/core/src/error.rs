use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },

    #[error("domain error in {op}: {reason}")]
    Domain { op: &'static str, reason: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is not recorded on this tape")]
    DetachedFromTape,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("non-finite value in parameter `{param}` after step {step}")]
    NonFinite { param: String, step: usize },

    #[error("text does not fit canvas: needs {required_width}x{required_height} px, canvas is {available_width}x{available_height} px")]
    TextOverflow {
        required_width: usize,
        required_height: usize,
        available_width: usize,
        available_height: usize,
    },

    #[error("label `{label}` is not encodable: {reason}")]
    InvalidLabel { label: String, reason: String },

    #[error("CTC label of length {label_len} needs at least {required} time steps, got {steps}")]
    LabelTooLong {
        label_len: usize,
        required: usize,
        steps: usize,
    },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("checkpoint error at byte {offset}: {reason}")]
    Checkpoint { offset: usize, reason: String },

    #[error("model kind mismatch: expected {expected}, found {found}")]
    KindMismatch { expected: String, found: String },

    #[error("image error for {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
