use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("{path}: payload length {actual} bytes, expected {expected}")]
    PayloadLength { path: PathBuf, expected: usize, actual: usize },
    #[error("invalid stage code {0}")]
    InvalidStage(u8),
    #[error("subject `{0}` has no sleep epochs")]
    NoSleep(String),
    #[error("unknown annotation scheme `{0}`")]
    UnknownScheme(String),
    #[error("raw code {code} has no mapping under scheme `{scheme}`")]
    UnmappedCode { scheme: String, code: i32 },
    #[error("invalid fold plan: {0}")]
    FoldPlan(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("class {0} has no epochs")]
    EmptyClass(&'static str),
    #[error("model spec: {0}")]
    ModelSpec(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("subject isolation violated: {0}")]
    Isolation(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        #[source]
        source: Box<SslError>,
    },
    #[error("report: {0}")]
    Report(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Nn(#[from] sleepssl_nn::NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

impl SslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        SslError::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, SslError>;
