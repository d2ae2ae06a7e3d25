//! Retinal vessel segmentation with edge-aware multi-class labels and a deeply
//! supervised residual U-net.

pub mod cli;
pub mod dataio;
pub mod error;
pub mod evaluate;
pub mod labelgen;
pub mod network;
pub mod preprocess;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
