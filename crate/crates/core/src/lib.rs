//! Reference-based super-resolution for angiogram-like images: synthetic data,
//! feature encoding, texture search and generation, fusion decoding, losses,
//! metrics and training.

pub mod checkpoint;
pub mod critic;
pub mod decoder;
pub mod encoder;
pub mod eval;
mod error;
pub mod generator;
pub mod gradcheck;
pub mod imaging;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod search;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
