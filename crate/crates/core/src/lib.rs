pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod nn;
pub mod norm;
pub mod rng;
pub mod ssl;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
