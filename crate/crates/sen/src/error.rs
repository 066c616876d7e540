use std::path::PathBuf;

use sen_core::params::LoadError;
use sen_core::train::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("annotation record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("annotation file: {0}")]
    Annotations(String),
    #[error("annotation record {index}: image {} not found", path.display())]
    MissingImage { index: usize, path: PathBuf },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: image::ImageError },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("gallery cache {} not found; build it with `sen build-cache --ckpt <CKPT> --split <SPLIT> --out {}`", path.display(), path.display())]
    MissingCache { path: PathBuf },
    #[error(transparent)]
    Core(#[from] sen_core::Error),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Load(#[from] LoadError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}
