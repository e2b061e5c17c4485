pub mod adam;
pub mod config;
pub mod dataset;
pub mod diffop;
pub mod error;
pub mod field;
pub mod gpr;
pub mod harness;
pub mod inference;
pub mod kernel;
pub mod linalg;
pub mod linearizer;
pub mod predictor;
pub mod system;

pub use error::{Error, Result};
