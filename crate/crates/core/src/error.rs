use alloc::string::String;

use thiserror::Error;

use crate::params::LoadError;

#[derive(Debug, Error, PartialEq)]
pub enum Error {
    #[error("image of {height}x{width} cannot be split into {patch}x{patch} patches")]
    PatchDimension { height: usize, width: usize, patch: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("index {index} out of range for {bound} {what}")]
    OutOfRange { what: &'static str, index: usize, bound: usize },
    #[error("{0}")]
    Domain(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("invalid token sequence: {0}")]
    InvalidTokens(String),
    #[error(transparent)]
    Load(#[from] LoadError),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
