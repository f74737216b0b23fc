//! Multi-modal prompt tuning of a frozen Vision Transformer.

pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod params;
pub mod prompts;
pub mod seed;
pub mod synthetic;
pub mod trainer;

pub use error::{Error, Result};
