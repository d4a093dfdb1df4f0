use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("malformed input at {location}: {message}")]
    Malformed { location: String, message: String },

    #[error("id out of range in locale `{locale}`, instance {instance}: {message}")]
    OutOfRange {
        locale: String,
        instance: usize,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("instance {instance} has zero probability under every class")]
    ZeroProbability { instance: usize },

    #[error("optimizer stopped after {iterations} iterations with gradient norm {grad_norm:e}")]
    NotConverged { iterations: usize, grad_norm: f64 },

    #[error("enumeration needs {required} assignments, cap is {cap}")]
    OracleCap { required: f64, cap: u64 },

    #[error("unlabeled instance {instance} in locale `{locale}`")]
    Unlabeled { locale: String, instance: usize },

    #[error("no positive gold examples")]
    NoPositives,

    #[error("recall level {0} is not reachable")]
    RecallUnreachable(f64),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
