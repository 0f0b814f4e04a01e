//! Semi-supervised co-training of two volumetric segmentation networks with
//! cross pseudo-supervision, CutMix-consistent targets, and text-feature
//! conditioning at the encoder bottleneck.

pub mod augment;
pub mod checkpoint;
pub mod dataio;
pub mod error;
pub mod experiment;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod report;
pub mod segmodel;
pub mod textknow;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
