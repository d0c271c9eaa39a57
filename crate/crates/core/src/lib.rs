pub mod cli;
pub mod dataio;
pub mod error;
pub mod frame;
pub mod geometry;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod splat;
pub mod trainer;

pub use error::{Error, Result};
