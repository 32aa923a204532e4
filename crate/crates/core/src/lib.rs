//! Multi-modal keyphrase generation core: data pipeline, encoders, image
//! noise filtering, keyphrase classifier, pointer-network generator,
//! two-stage training, and evaluation metrics.
//!
//! The crate is `no_std` + `alloc`; all IO (datasets, checkpoints, CLI)
//! lives in the companion binary crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod numerics;

pub mod data;
pub mod synth;

pub mod classifier;
pub mod generator;
pub mod image_encoder;
pub mod model;
pub mod noise_filter;
pub mod text_encoder;

pub mod checkpoint;
pub mod evaluation;
pub mod training;

pub use error::{Error, Result};
