use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("unknown state label `{0}`")]
    UnknownState(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("protocol parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("missing label `{0}`")]
    MissingLabel(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("config key `{key}`: {msg}")]
    ConfigKey { key: String, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(SimError::Domain(msg.into()))
}
