use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("schema error in {context}: {message}")]
    Schema { context: String, message: String },

    #[error("ordering violation: {0}")]
    Ordering(String),

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: frame index {index} is not in the manifest")]
    UnknownFrame { line: usize, index: u64 },

    #[error("line {line}: invalid box coordinates {coords:?}")]
    Coordinate { line: usize, coords: [f64; 4] },

    #[error("invalid bounding box {0:?}")]
    InvalidBox([f64; 4]),

    #[error("GPS track needs at least 2 fixes, got {0}")]
    TooFewFixes(usize),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("timestamp {t_ms} ms outside track span [{start_ms}, {end_ms}]")]
    OutOfSpan { t_ms: u64, start_ms: u64, end_ms: u64 },

    #[error("frame index {0} is outside the manifest")]
    FrameOutOfRange(u64),

    #[error("runner did not answer within {0} ms")]
    RunnerTimeout(u64),

    #[error("malformed runner response: {0}")]
    MalformedResponse(String),

    #[error("runner process exited")]
    RunnerExited,

    #[error("runner is unusable after an earlier failure")]
    RunnerUnusable,

    #[error("dimension mismatch: base image is {base:?}, layer targets {layer:?}")]
    DimensionMismatch { base: (u32, u32), layer: (u32, u32) },

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("{op} expects {expected} image(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("cannot aggregate an empty run list")]
    EmptyRuns,

    #[error("benchmark run {run} failed: {message}")]
    RunFailed { run: usize, message: String },

    #[error("prediction and ground-truth frame sets differ: {0}")]
    FrameSetMismatch(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("pipeline stage `{0}` terminated unexpectedly")]
    StagePanicked(&'static str),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(context: impl Into<String>, message: impl ToString) -> Self {
        Error::Schema {
            context: context.into(),
            message: message.to_string(),
        }
    }
}
