//! Semantic RGB-D image synthesis.
//!
//! A SPADE generator with two decoder heads (appearance and geometry)
//! trained against a segmentation-style discriminator with `N + 1`
//! outputs per pixel.

pub mod checkpoint;
mod conv;
pub mod dataio;
pub mod discriminator;
pub mod error;
mod fused;
pub mod generator;
pub mod losses;
pub mod metrics;
pub mod mixer;
pub mod nn;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
