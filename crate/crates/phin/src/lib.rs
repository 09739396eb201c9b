//! File formats, on-disk datasets, checkpoints and the command-line driver
//! around `phin-core`.

pub mod ckpt;
pub mod cli;
pub mod datagen;
pub mod error;
pub mod flowio;
pub mod fsio;
pub mod manifest;
pub mod pnm;

pub use error::{Error, Result};
