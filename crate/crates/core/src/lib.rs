//! Multispectral (visible + infrared) anchor-free object detection.

pub mod data;
pub mod detector;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod loss;
pub mod mcf;
pub mod metrics;
pub mod nn;
pub mod train;
pub mod transfer;

pub use error::{Error, Result};
