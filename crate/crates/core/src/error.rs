use alloc::string::String;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid noise schedule: {0}")]
    Schedule(String),
    #[error("timestep {t} outside [{lo}, {hi}]")]
    Timestep { t: usize, lo: usize, hi: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown tap point: {0}")]
    Tap(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error("parameter error: {0}")]
    Param(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
