//! File formats, dataset IO and experiment drivers for `sen-core`.

pub mod ablation;
pub mod annotations;
pub mod cache;
pub mod checkpoint;
pub mod error;
pub mod experiment;
pub mod format;
pub mod images;
pub mod runlog;
pub mod synth;

pub use error::{Error, Result};
