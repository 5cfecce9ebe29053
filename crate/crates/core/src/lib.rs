pub mod cli;
pub mod config;
pub mod dataset;
pub mod error;
pub mod finetune;
pub mod maskgen;
pub mod model;
pub mod pretrain;
pub mod seed;
pub mod spectro;

pub use error::{Error, Result};
