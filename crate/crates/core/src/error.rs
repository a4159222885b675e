use std::path::PathBuf;

use thiserror::Error;

use crate::dataset::ImageId;

#[derive(Debug, Error, PartialEq)]
pub enum GeometryError {
    #[error("coordinate {0} is not finite or out of range")]
    OutOfRange(f64),
    #[error("degenerate box: w={w}, h={h}")]
    Degenerate { w: f64, h: f64 },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("malformed {kind} record {id}: {reason}")]
    MalformedRecord {
        kind: &'static str,
        id: String,
        reason: String,
    },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u64 },
    #[error("empty dataset")]
    Empty,
    #[error("dataset has no instances")]
    NoInstances,
}

#[derive(Debug, Error, PartialEq)]
pub enum CollageError {
    #[error("k must be a perfect square in {{1,4,9}}, got {0}")]
    UnsupportedK(u32),
    #[error("collage needs {expected} sources, got {got}")]
    WrongSourceCount { expected: usize, got: usize },
    #[error("canvas {width}x{height} is empty or not divisible by {side}")]
    BadCanvas { width: u32, height: u32, side: u32 },
    #[error("source image {id} ({width}x{height}) does not fit the canvas")]
    SourceTooLarge {
        id: ImageId,
        width: u32,
        height: u32,
    },
    #[error("no pixel buffer for image {0}")]
    MissingPixels(ImageId),
    #[error("pixel buffer for image {id} is {got_w}x{got_h}, expected {want_w}x{want_h}")]
    DimensionMismatch {
        id: ImageId,
        got_w: u32,
        got_h: u32,
        want_w: u32,
        want_h: u32,
    },
    #[error("image {id} has {got} channels, collage uses {want}")]
    ChannelMismatch { id: ImageId, got: u8, want: u8 },
    #[error("pixel buffer of {len} bytes does not match {width}x{height}x{channels}")]
    BadBuffer {
        len: usize,
        width: u32,
        height: u32,
        channels: u8,
    },
}

#[derive(Debug, Error, PartialEq)]
pub enum ControllerError {
    #[error("tau out of range: {0}")]
    TauOutOfRange(f64),
    #[error("random collage probability out of range: {0}")]
    ProbabilityOutOfRange(f64),
    #[error("unknown strategy {0:?}")]
    UnknownStrategy(String),
    #[error("loss value {value} for {scale} is negative or not finite")]
    InvalidLoss { scale: &'static str, value: f64 },
    #[error("report iter {report} does not match composition iter {composition}")]
    IterMismatch { report: u64, composition: u64 },
    #[error("out-of-order iteration: got {got} after {last}")]
    OutOfOrder { last: u64, got: u64 },
}

#[derive(Debug, Error, PartialEq)]
pub enum SchedulerError {
    #[error("batch size must be at least 1")]
    ZeroBatch,
    #[error("dataset has {available} images, a batch needs {needed}")]
    DatasetTooSmall { available: usize, needed: usize },
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error("iters must be at least 1")]
    NoIterations,
}

#[derive(Debug, Error)]
pub enum ImageIoError {
    #[error("image {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error(transparent)]
    Collage(#[from] CollageError),
}

/// Per-message failures, sent back to the client as `error` replies.
#[derive(Debug, Error, PartialEq)]
pub enum ServiceError {
    #[error("tau out of range")]
    TauOutOfRange,
    #[error("k must be a perfect square in {{1,4,9}}")]
    BadK,
    #[error("batch_size must be at least 1")]
    BadBatchSize,
    #[error("{0}")]
    Strategy(ControllerError),
    #[error("cannot load dataset {path}: {reason}")]
    Dataset { path: String, reason: String },
    #[error("dataset has {available} images, a collage batch needs {needed}")]
    DatasetTooSmall { available: usize, needed: usize },
    #[error("iteration replay")]
    Replay,
    #[error("out-of-order iteration: expected {expected}, got {got}")]
    OutOfOrder { expected: u64, got: u64 },
    #[error("{0}")]
    Report(ControllerError),
    #[error("no active session")]
    NoSession,
    #[error("session already active")]
    SessionActive,
    #[error("unexpected message type {0}")]
    Unexpected(&'static str),
}
