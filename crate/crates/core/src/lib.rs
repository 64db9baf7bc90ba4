//! Desk-scale poster generation: a pixel-space rectified-flow transformer with
//! text-rendering and scene-generation control branches, a foreground
//! extension detector, reward feedback, staged training and evaluation.

pub mod datasynth;
pub mod error;
pub mod evalharness;
pub mod feedback;
pub mod fgdetect;
pub mod genmodel;
pub mod glyphrep;
pub mod image;
pub mod nn;
pub mod pipeline;
pub mod trainer;

pub use error::{Error, Result};
