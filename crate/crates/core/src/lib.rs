pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod experiment;
pub mod fusion;
pub mod gradcheck;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod prompts;
pub mod tensor;

pub use error::{Error, Result};
