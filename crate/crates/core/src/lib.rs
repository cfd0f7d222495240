//! Weakly supervised temporal language grounding on token-by-clip
//! semantic alignment maps.

pub mod alignment;
pub mod config;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod eval_metrics;
pub mod grounding;
pub mod harness;
pub mod icim;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use error::{FsanError, Result};
