pub mod config;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod model;
pub mod rng;

pub use error::{Error, Result};
pub mod assignment;
pub mod cli;
pub mod data;
pub mod gmm;
pub mod metrics;
pub mod partition;
pub mod persistence;
pub mod pipeline;
pub mod training;
