use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Num(#[from] numcore::NumError),
    #[error("bad header: {0}")]
    Header(String),
    #[error("invalid segment index: {0}")]
    SegmentIndex(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("corrupt file: {0}")]
    Format(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
