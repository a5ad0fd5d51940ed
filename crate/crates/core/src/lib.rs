//! (2.5+1)D spatio-temporal scene graphs for video question answering.
//!
//! Detections are lifted into camera space, registered across frames,
//! compacted by merging re-observed static objects, and encoded with a
//! hierarchical kernel attention transformer feeding a multiple-choice QA head.

pub mod attention;
pub mod cli;
pub mod compactor;
pub mod error;
pub mod geometry;
pub mod graph;
pub mod numcore;
pub mod qa;
pub mod synth;

pub use error::{Error, Result};
