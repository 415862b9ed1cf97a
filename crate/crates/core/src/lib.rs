pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod fcsd;
pub mod losses;
pub mod model;
pub mod nn;
pub mod restoration;
pub mod rf;
pub mod synth;
pub mod trainer;

pub use error::{R2dError, Result};
