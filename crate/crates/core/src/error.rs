use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("N >= 3 required, got {0} anchors")]
    TooFewAnchors(usize),

    #[error("anchors are collinear; planar position is unobservable")]
    CollinearAnchors,

    #[error("non-finite coordinate or parameter: {0}")]
    NonFinite(&'static str),

    #[error("zero range between {0} and {1}")]
    ZeroRange(String, String),

    #[error("listener position required")]
    MissingListener,

    #[error("invalid clock parameters: {0}")]
    InvalidClock(String),

    #[error("repeated consecutive sender {node} at position {position}")]
    RepeatedSender { node: usize, position: usize },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("dimension mismatch: {what} (expected {expected}, got {got})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("covariance has negative eigenvalue {0:e}")]
    NegativeEigenvalue(f64),

    #[error("information matrix is singular; geometry unobservable")]
    SingularInformation,

    #[error("config error: {0}")]
    Config(String),

    #[error("data error at line {line}: {msg}")]
    Data { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
