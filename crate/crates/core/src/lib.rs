//! Dual-encoder text-to-image person retrieval with a text-guided image
//! restoration auxiliary task.
//!
//! The crate is `no_std` (with `alloc`): every module is pure computation
//! over in-memory tensors, images and strings. File formats, dataset IO and
//! the command-line driver live in the `sen` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod augmentation;
pub mod config;
pub mod autograd;
pub mod data;
pub mod encoders;
pub mod losses;
pub mod model;
pub mod error;
pub mod nn;
pub mod params;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod tir;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
