pub mod analysis;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod host;
pub mod lens;
pub mod loss;
pub mod train;
pub mod transform;

pub use error::{Error, Result};
