//! Patch-based volumetric vessel segmentation.

pub mod error;
pub mod eval;
pub mod kvol;
pub mod morphology;
pub mod nn;
pub mod phantom;
pub mod pipeline;
pub mod seeding;
pub mod stitch;
pub mod train;
pub mod volume;
pub mod weighting;

pub use error::{Error, Result};
