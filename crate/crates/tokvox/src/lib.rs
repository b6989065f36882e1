//! Files, training drivers and the `tokvox` command line around `tokvox-core`.
//!
//! Formats: 16-bit PCM mono WAV, `S3TE` teacher embeddings, `S3CG` code
//! grids, `S3CK` checkpoints, TOML run configs and NDJSON metrics journals.
//! All binary formats are little-endian and carry a version field.

pub mod cli;
pub mod config;
pub mod data;
pub mod drivers;
pub mod error;
pub mod formats;
pub mod journal;
pub mod wav;

pub use config::RunConfig;
pub use error::{Error, Result};
