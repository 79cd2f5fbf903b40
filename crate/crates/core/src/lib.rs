pub mod anchors;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod events;
pub mod features;
pub mod graphify;
pub mod model;
pub mod objective;
pub mod refiner;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
