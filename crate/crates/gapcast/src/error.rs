use thiserror::Error;

/// Crate-wide error type, tagged by the subsystem that raised it.
#[derive(Debug, Error)]
pub enum Error {
    #[error("map: {0}")]
    Map(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("mlp: {0}")]
    Mlp(String),
    #[error("gap: {0}")]
    Gap(String),
    #[error("driver: {0}")]
    Driver(String),
    #[error("env: {0}")]
    Env(String),
    #[error("training: {0}")]
    Training(String),
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("eval: {0}")]
    Eval(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
