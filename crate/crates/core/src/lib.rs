pub mod config;
pub mod datasynth;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod realtime;
pub mod rng;
pub mod serving;
pub mod train;

pub use error::{Error, Result};
