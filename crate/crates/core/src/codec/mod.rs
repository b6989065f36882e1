//! Waveform codec with a split semantic/acoustic quantizer.

pub mod config;
pub mod distill;
pub mod model;
pub mod quant;

pub use config::{bitrate, frame_rate, AcousticInput, CodecConfig, DiscConfig, DistillTarget, LossWeights, MelLossConfig};
pub use model::CodecModel;
pub use quant::{CodeGrid, QuantizerStack};
pub mod disc;
pub mod losses;
pub mod train;
