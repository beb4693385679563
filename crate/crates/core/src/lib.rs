//! Dichotomized patch refinement: select object-bearing image patches, refine
//! them with a conditional diffusion model, enlarge the rest by interpolation,
//! and reassemble full images for detection.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod nn;
pub mod organizer;
pub mod pipeline;
pub mod refiner;
pub mod selector;

pub use error::{DprError, Result};
