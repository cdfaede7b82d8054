pub mod baselines;
pub mod chemtab;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod flamelet;
pub mod inference;
pub mod nn;

pub use error::{Error, Result};
