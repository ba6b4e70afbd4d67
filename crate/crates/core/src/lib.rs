pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data_io;
pub mod encoders;
pub mod error;
pub mod mamba;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod ssm;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
