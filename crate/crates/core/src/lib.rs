pub mod checkpoint;
pub mod config;
pub mod detector;
pub mod error;
pub mod evalmetrics;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod scoring;
pub mod segmenter;
pub mod synthgen;
pub mod tiling;
pub mod vae;

pub use error::{Result, UdError};
