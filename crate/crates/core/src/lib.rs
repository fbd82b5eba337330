pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod trainer;

pub use error::{Error, Result};
