use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Diff(#[from] diffcore::Error),
    #[error("invalid motion layout: {0}")]
    Layout(String),
    #[error("invalid control: {0}")]
    Control(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("numeric failure at {stage} step {step}: {detail}")]
    Numeric {
        stage: &'static str,
        step: usize,
        detail: String,
    },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("missing artifact: {0}")]
    Missing(String),
    #[error("config: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
