pub mod cli;
pub mod config;
pub mod datapipe;
pub mod encoders;
pub mod error;
pub mod explain;
pub mod fusion;
pub mod hypergat;
pub mod latentode;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
