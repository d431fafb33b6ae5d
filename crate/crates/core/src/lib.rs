//! Multimodal cine + EHR survival pipeline.

pub mod encoders;
pub mod distill;
pub mod error;
pub mod evalmetrics;
pub mod harness;
pub mod interpret;
pub mod promptalign;
pub mod io;
pub mod motionprep;
pub mod rng;
pub mod survival;
pub mod synthgen;
pub mod textcorpus;

pub use error::{PrismError, Result};
