//! Query-driven multi-task face analysis on a synthetic face suite.

pub mod baseline;
pub mod config;
pub mod encoder;
pub mod error;
pub mod mff;
pub mod mim;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod pgm;
pub mod qdecoder;
pub mod synthdata;
pub mod tasks;
pub mod trainer;
pub mod workflow;

pub use error::{Error, Result};
