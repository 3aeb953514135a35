//! Flow-to-pose monocular visual odometry at desk scale.
//!
//! A pose regressor consumes dense optical flow, optionally concatenated with
//! an intrinsics layer, and predicts the camera motion between two frames.
//! Training data comes from procedural scenes with exact flow, so the whole
//! pipeline runs without images or a matching network.

pub mod augment;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod seed;
pub mod synthgen;
pub mod trainer;

pub use error::{Error, Result};
