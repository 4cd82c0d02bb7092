//! Two-stream action recognition with a learned per-channel gate that blends
//! appearance and pose features.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod integrator;
pub mod model;
pub mod nn;
pub mod pose_codec;
pub mod sampling;
pub mod synth;
pub mod train_eval;

pub use error::{Error, Result};
