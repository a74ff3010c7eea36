//! Few-shot 3D segmentation core: local prototypical comparison over
//! overlapping windows, affine support-to-query alignment, support-mask
//! conditioning, and the episodic training/evaluation engine, all on a
//! deterministic CPU tensor tape.

pub mod backbone;
pub mod conditioning;
pub mod config;
pub mod dataset;
pub mod engine;
pub mod error;
pub mod graph;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod preprocess;
pub mod proto;
pub mod registration;
pub mod resample;
pub mod sampler;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
