use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum PddError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("integrity error: {0}")]
    Integrity(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image codec error: {0}")]
    Image(#[from] image::ImageError),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Autograd(#[from] pdd_autograd::AutogradError),
}

pub type Result<T, E = PddError> = std::result::Result<T, E>;

pub(crate) trait IoContext<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn at(self, path: impl Into<PathBuf>) -> Result<T> {
        self.map_err(|source| PddError::Io { path: path.into(), source })
    }
}
