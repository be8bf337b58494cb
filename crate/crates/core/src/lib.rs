pub mod alignment;
pub mod autodiff;
pub mod cli_io;
pub mod dataset;
pub mod env;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod generator;
pub mod model;
pub mod nn;
pub mod optim;
pub mod policy;
pub mod rollout;
pub mod training;
pub mod types;

pub use error::{Error, Result};
