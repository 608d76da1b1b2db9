//! WiFi RSSI fingerprint indoor localization pipeline: dataset ingestion and
//! augmentation, a convolutional-autoencoder + CNN classifier trained from
//! scratch, uniform quantization (post-training and quantization-aware),
//! magnitude/filter pruning, and accuracy/footprint/latency reporting.

pub mod error;
pub mod eval;
pub mod infer;
pub mod io_util;
pub mod compress;
pub mod dataset;
pub mod model;
pub mod tensor;

pub use error::{Error, Result};
