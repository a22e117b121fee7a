pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod data;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod par;
pub mod params;
pub mod training;
pub mod wavelet;

pub use error::{Error, Result};
