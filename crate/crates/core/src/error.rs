use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("index {index} out of range for table of {len} elements")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("address {address:#x} lies outside modeled memory ({limit} bytes); table layout misconfigured")]
    AddressOutOfRange { address: u64, limit: u64 },

    #[error("batch of {size} blocks exceeds the {max} threads of the modeled GPU")]
    BatchTooLarge { size: usize, max: usize },

    #[error("zero variance in {0}")]
    ZeroVariance(&'static str),

    #[error("zero noise variance: SNR is infinite")]
    InfiniteSnr,

    #[error("domain error: {0}")]
    Domain(String),

    #[error("target correlation is not above the baseline correlation; no sample count reaches it")]
    Unattainable,

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed record: {0}")]
    Parse(String),

    #[error("schema mismatch: {0}")]
    Schema(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
