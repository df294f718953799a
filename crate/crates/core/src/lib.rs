//! Brain-tuning of a small joint audio-video transformer, with the
//! evaluation stack around it: cross-subject noise ceilings, voxel-wise ridge
//! encoding models, ceiling-normalized ROI alignment, frozen-feature linear
//! probes and small-sample significance tests.
//!
//! Everything runs on synthetic worlds with a known generative model
//! ([`synthworld`]), so each stage has a computable ground truth.

pub mod braintune;
pub mod cli;
pub mod data;
pub mod encodeval;
pub mod error;
pub mod matrix;
pub mod minimmt;
pub mod noiseceil;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod probes;
pub mod stats;
pub mod synthworld;

pub use error::{Error, Result};
pub use matrix::{read_matrix, write_matrix, MatrixF64};
