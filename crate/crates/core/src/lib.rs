pub mod data;
pub mod error;
pub mod gridworlds;
pub mod hyperteacher;
pub mod metrics;
pub mod models;
pub mod numcore;
pub mod taskspace;
pub mod teacherstudent;
pub mod theorylab;
pub mod trainer;

pub use error::{Error, Result};
