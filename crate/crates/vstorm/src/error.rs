//! Error types, one enum per subsystem.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasurementError {
    #[error("invalid grid: {0}")]
    BadGrid(String),
    #[error("non-finite values in {0}")]
    NonFinite(&'static str),
    #[error("operator/input geometry mismatch: operator {operator} cannot act on {input}")]
    GeometryMismatch { operator: String, input: String },
    #[error("measurement length {got} does not match operator output length {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("invalid operator: {0}")]
    BadOperator(String),
}

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("layer {index} ({layer}) cannot follow layer {prev_index} ({prev}): {reason}")]
    LayerChain {
        prev_index: usize,
        prev: String,
        index: usize,
        layer: String,
        reason: String,
    },
    #[error("invalid layer spec: {0}")]
    BadLayer(String),
    #[error("latent vector length {got} does not match latent dimension {expected}")]
    LatentLength { expected: usize, got: usize },
    #[error("cotangent shape {got} does not match generator output {expected}")]
    UpstreamShape { expected: String, got: String },
}

#[derive(Debug, Error)]
pub enum LatentError {
    #[error("unknown frame (slice {slice}, t {t}); bank covers {n_slice} slices x {n_frames} frames")]
    UnknownFrame {
        slice: usize,
        t: usize,
        n_slice: usize,
        n_frames: usize,
    },
    #[error("deviation must be positive, got {0}")]
    NonPositiveDeviation(f64),
    #[error("draw length {got} does not match latent dimension {expected}")]
    DrawLength { expected: usize, got: usize },
    #[error("non-finite draw")]
    NonFiniteDraw,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("frame {frame_index} (slice {slice}, t {t}): {source}")]
    Frame {
        frame_index: usize,
        slice: usize,
        t: usize,
        source: MeasurementError,
    },
    #[error("slice index {slice} out of range for a {n_slice}-slice model")]
    SliceRange { slice: usize, n_slice: usize },
    #[error("non-finite loss in term `{term}` at epoch {epoch}")]
    NonFinite { term: &'static str, epoch: usize },
    #[error("generator error: {0}")]
    Generator(#[from] GeneratorError),
    #[error("latent error: {0}")]
    Latent(#[from] LatentError),
    #[error("dataset mismatch: {0}")]
    Dataset(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("parse error at byte {offset}: {reason}")]
    Parse { offset: u64, reason: String },
    #[error("invalid phantom spec: {0}")]
    BadSpec(String),
    #[error("checksum mismatch: file is corrupt")]
    Checksum,
    #[error("unsupported container version {0}")]
    Version(u32),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("measurement error: {0}")]
    Measurement(#[from] MeasurementError),
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("shape mismatch: reference is {reference}, reconstruction is {reconstruction}")]
    ShapeMismatch {
        reference: String,
        reconstruction: String,
    },
    #[error("reference image is all zero; the metric is undefined")]
    ZeroReference,
    #[error("slice index {slice} out of range for a {n_slice}-slice model")]
    SliceRange { slice: usize, n_slice: usize },
    #[error("ground truth unavailable: {0}")]
    NoGroundTruth(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
