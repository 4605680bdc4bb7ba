//! Self-supervised pretraining for 3D volumes built on two pretext tasks:
//! vector prediction (regressing normalized spherical-coordinate vectors
//! from canonical crop points to a per-volume reference landmark) and
//! boundary-focused reconstruction (joint voxel and Scharr-edge regression
//! from a noised input crop), plus a fine-tuning and evaluation harness and
//! a synthetic-phantom benchmark that runs at desk scale.

pub mod augment;
pub mod boundary;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod geometry;
pub mod io;
pub mod losses;
pub mod network;
pub mod nn;
pub mod phantom;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
