//! Core of a video camouflaged object detection pipeline: tensor numerics
//! with reverse-mode autodiff, the clue encoders, the causal fusion backbone,
//! foreground/background cue generation, the promptable segmenter, the
//! training objectives, evaluation metrics and a procedural camouflage video
//! generator.
//!
//! The crate is `no_std` (with `alloc`) when built without the default `std`
//! feature. File formats, datasets on disk and the command line live in the
//! companion `phin` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod cues;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod media;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod segmenter;
pub mod synth;
pub mod tensor;
pub mod train;

pub use autograd::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
