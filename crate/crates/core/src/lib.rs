//! Occupancy maps, trajectory windows and the multi-sample trajectory
//! predictor.
//!
//! This crate is the whole inference path: loading a map, windowing
//! trajectories, and running a trained predictor from a checkpoint. The
//! training-time machinery (contrastive sampling, losses, metrics) lives in
//! `ecam-train` and is never linked by code that only predicts.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geom;
pub mod gridmap;
pub mod model;
pub mod nn;

pub use error::{Error, Result};
pub use geom::Vec2;
