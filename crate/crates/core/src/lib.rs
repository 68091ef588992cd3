//! Multi-source adversarial domain aggregation for semantic segmentation,
//! at a scale that trains on a CPU.
//!
//! * [`datagen`] renders labeled source domains and an unlabeled target
//!   domain of synthetic street scenes.
//! * [`models`] holds the generators, discriminators and the segmenter.
//! * [`losses`] implements every training objective as a graph function.
//! * [`trainer`] runs the staged adversarial schedule.
//! * [`metrics`] accumulates confusion matrices and reports IoU.

pub mod checkpoint;
pub mod datagen;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod trainer;

pub use error::{MadanError, Result};
pub use madan_nn as nn;
