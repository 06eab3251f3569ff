pub mod diffcore;
pub mod error;
pub mod geometry;

pub use error::{Error, Result};
pub mod cli;
pub mod data;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod rank_oracle;
pub mod runner;
