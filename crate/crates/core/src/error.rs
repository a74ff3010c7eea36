//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("window layout does not tile the grid: {0}")]
    NonTilingWindows(String),

    #[error("catalog error: {0}")]
    Catalog(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("empty sampling pool: {0}")]
    EmptyPool(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("data source error: {0}")]
    DataSource(String),

    #[error("metric undefined: {0}")]
    MetricUndefined(String),
}

pub type Result<T> = std::result::Result<T, Error>;
