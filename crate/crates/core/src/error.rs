//! Error type shared by every module in the crate.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("cannot normalize a zero vector")]
    ZeroVector,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("class index {index} out of range for {num_classes} classes")]
    ClassIndexOutOfRange { index: usize, num_classes: usize },

    #[error("training diverged: accuracy {accuracy:.3} below {required:.3} after {epochs} epochs")]
    TrainingDiverged {
        accuracy: f64,
        required: f64,
        epochs: usize,
    },

    #[error("empty {0} class: probes need at least one sample per class")]
    EmptyClass(&'static str),

    #[error("degenerate pattern: positive and negative centroids coincide")]
    DegeneratePattern,

    #[error("degenerate masks: every mask is identical ({0})")]
    DegenerateMasks(&'static str),

    #[error("mix collapsed to the zero vector (anti-parallel inputs)")]
    DegenerateMix,

    #[error("CAVs are collinear (|cosine| = {0})")]
    CollinearCavs(f64),

    #[error("CAV metadata mismatch: {0}")]
    CavMismatch(String),

    #[error("unsupported pooling {pooling} for method {method}")]
    UnsupportedPooling {
        method: &'static str,
        pooling: &'static str,
    },

    #[error("buffer exhausted after {scanned} samples: found {found} false positives, needed {needed}")]
    InsufficientFalsePositives {
        found: usize,
        needed: usize,
        scanned: usize,
    },

    #[error("infeasible area constraint: min_area_fraction {0} cannot be met at this image size")]
    InfeasibleArea(f32),

    #[error("donor image {donor_index} contains the concept and cannot replace a background")]
    DonorContainsConcept { donor_index: usize },

    #[error("all samples degenerate in {0}; nothing to score")]
    AllSamplesDegenerate(&'static str),

    #[error("activation maximization produced a non-finite objective at step {step}")]
    ActMaxNonFinite { step: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("corpus schema violation at {path}: {message}")]
    SchemaViolation { path: PathBuf, message: String },

    #[error("malformed {format} data: {message}")]
    Format {
        format: &'static str,
        message: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Exit-code class used by the command-line frontend:
    /// 1 usage/config, 2 data error, 3 numeric failure.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            InvalidConfig(_) => 1,
            SchemaViolation { .. } | Format { .. } | Io(_) | Json(_) | Image(_)
            | ShapeMismatch { .. } | CavMismatch(_) | ClassIndexOutOfRange { .. } => 2,
            _ => 3,
        }
    }
}
