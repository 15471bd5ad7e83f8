use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid evidence: {0}")]
    InvalidEvidence(String),
    #[error("invalid opinion: {0}")]
    InvalidOpinion(String),
    #[error("degenerate opinion: uncertainty is zero (infinite evidence)")]
    DegenerateOpinion,
    #[error("total conflict between opinions (C = {0})")]
    TotalConflict(f64),
    #[error("nothing to fuse")]
    EmptyFusion,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("graph error: {0}")]
    Graph(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("degenerate correlation: {0}")]
    DegenerateCorrelation(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
