//! Consistency autoencoder for audio: representation, schedule, network,
//! training, codec, metrics and data handling.
pub mod audio_io;
pub mod audio_repr;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod dataio;
mod error;
pub mod fsutil;
pub mod metrics;
pub mod model;
pub mod network;
pub mod schedule;
pub mod synth;
pub mod training;
pub use error::{Error, Result};
